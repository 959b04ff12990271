"""Training losses and evaluation metrics.

The losses accept numpy arrays or :class:`~deformcast.autodiff.Var` and
return scalar Vars, so they can sit at the end of a differentiable graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import autodiff as ad
from .errors import InvalidArgumentError, ShapeMismatchError

DEFAULT_LAMBDA_G = 0.1


def _pair(pred, truth, op):
    pred = ad.as_var(pred)
    truth = ad.as_var(truth, dtype=pred.dtype)
    if pred.shape != truth.shape or pred.values.ndim != 2 or pred.shape[1] != 3:
        raise ShapeMismatchError(f"{op}: shapes {pred.shape} and {truth.shape} must match and be (N, 3)")
    if pred.shape[0] < 1:
        raise InvalidArgumentError(f"{op}: need at least one node")
    return pred, truth


def mse_loss(pred, truth):
    """Mean over nodes of the squared Euclidean position error."""
    pred, truth = _pair(pred, truth, "mse_loss")
    d = ad.sub(pred, truth)
    return ad.scale(ad.sum_all(ad.mul(d, d)), 1.0 / pred.shape[0])


def edge_operator(edges, n_nodes):
    """Sparse (E, N) matrix mapping node positions to edge vectors ``p_j - p_i``."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    m = len(e)
    rows = np.repeat(np.arange(m), 2)
    cols = e.ravel()
    vals = np.tile([-1.0, 1.0], m)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(m, n_nodes))


def graph_consistency(rest, pred_positions):
    """Mean over edges of ``|| (r_j - r_i) - (d_j - d_i) ||_2``.

    ``rest`` is the rest-pose :class:`~deformcast.mesh.MeshGraph`; edges are
    taken in its canonical ``i < j`` orientation, each once.
    """
    pred = ad.as_var(pred_positions)
    if pred.values.ndim != 2 or pred.shape != rest.positions.shape:
        raise ShapeMismatchError(
            f"graph_consistency: prediction {pred.shape} vs rest graph {rest.positions.shape}"
        )
    if rest.n_edges == 0:
        raise InvalidArgumentError("graph_consistency: graph has no edges")
    op = edge_operator(rest.edges, rest.n_nodes).astype(pred.dtype)
    grad_rest = np.asarray(op @ rest.positions.astype(pred.dtype))
    grad_pred = ad.spmm(op, pred)
    return ad.mean_all(ad.row_norms(ad.sub(grad_rest, grad_pred)))


@dataclass
class LossReport:
    l_mse: float
    l_graph: float
    l_total: float
    lambda_g: float
    total: ad.Var = field(default=None, repr=False, compare=False)

    def as_dict(self):
        return {"l_mse": self.l_mse, "l_graph": self.l_graph,
                "l_total": self.l_total, "lambda_g": self.lambda_g}


def total_loss(pred, truth, rest, lambda_g=DEFAULT_LAMBDA_G):
    """``L_mse + lambda_g * L_graph``. ``report.total`` is the differentiable scalar."""
    if lambda_g < 0:
        raise InvalidArgumentError(f"lambda_g must be >= 0, got {lambda_g}")
    l_mse = mse_loss(pred, truth)
    l_graph = graph_consistency(rest, pred)
    total = ad.add(l_mse, ad.scale(l_graph, lambda_g))
    m, g = float(l_mse.values), float(l_graph.values)
    return LossReport(m, g, m + float(lambda_g) * g, float(lambda_g), total)


def mae_metric(pred, truth):
    """Mean absolute error over all 3N coordinates."""
    p = np.asarray(pred.values if isinstance(pred, ad.Var) else pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"mae_metric: shapes {p.shape} and {t.shape} differ")
    return float(np.mean(np.abs(p - t)))
