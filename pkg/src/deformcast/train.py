"""Training, evaluation, ablation and timing harnesses."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dataset import load_manifest, load_sample, meta_field, read_meta, split_keys
from .encoding import ABLATION_MODES, ForceDescriptor
from .errors import InvalidArgumentError, NumericFaultError, SkipSample
from .losses import DEFAULT_LAMBDA_G, graph_consistency, mae_metric, mse_loss, total_loss
from .mesh import build_graph, extract_patch, load_mesh, normalize_pair, save_obj
from .sim import ContactSample, RigidCollider
from .model import ModelConfig, forward_prepared, init_params, load_checkpoint, prepare_inputs, save_checkpoint

logger = logging.getLogger(__name__)

ABLATION_ROWS = {"only_physics": "physics_only", "only_positional": "positional_only", "both": "both"}


LR_SCHEDULES = ("constant", "cosine")


def scheduled_lr(base, schedule, step, total):
    """Learning rate for optimizer step ``step`` (0-based) of ``total``."""
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * step / total))
    return base


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-3
    lambda_g: float = DEFAULT_LAMBDA_G
    patch_size: int | None = 1024
    seed: int = 0
    checkpoint_dir: str | None = None
    ablation: str = "both"
    dtype: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    select_on: str = "test"  # split used for best-checkpoint selection; "" disables it
    output_scale: float | str = "auto"  # "auto": RMS displacement of the training targets
    lr_schedule: str = "constant"  # or "cosine": decay to 0 over all steps

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArgumentError("learning_rate must be > 0")
        if self.lambda_g < 0:
            raise InvalidArgumentError("lambda_g must be >= 0")
        if self.patch_size is not None and self.patch_size < 1:
            raise InvalidArgumentError("patch_size must be >= 1 or None")
        if self.ablation not in ABLATION_MODES:
            raise InvalidArgumentError(f"unknown ablation mode {self.ablation!r}")
        if self.output_scale != "auto" and not float(self.output_scale) > 0:
            raise InvalidArgumentError("output_scale must be 'auto' or > 0")
        if self.lr_schedule not in LR_SCHEDULES:
            raise InvalidArgumentError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError("dtype must be float32 or float64")

    def as_dict(self):
        d = asdict(self)
        d["model"] = asdict(self.model)
        return d


# ----------------------------------------------------------------------------
# samples -> network inputs

@dataclass(eq=False)
class TrainingInstance:
    """One sample in normalized coordinates, ready for the network."""

    soft_graph: object
    rigid_graph: object
    force: ForceDescriptor
    target: np.ndarray
    transform: object
    index_map: np.ndarray
    key: str = ""
    _inputs: dict = field(default_factory=dict, repr=False)

    @property
    def object_name(self):
        return self.key.split("/")[0]

    def inputs(self, ablation="both", dtype=np.float32):
        k = (ablation, np.dtype(dtype).str)
        if k not in self._inputs:
            self._inputs[k] = prepare_inputs(self.soft_graph, self.rigid_graph, self.force, ablation, dtype)
        return self._inputs[k]


def make_training_instance(sample, patch_size=None, key=""):
    """Graphs, force and target for one ContactSample.

    With ``patch_size`` the soft graph is cut to the ``patch_size`` vertices
    nearest the contact centroid (the whole mesh if it is smaller). Both
    graphs and the target go through the same normalization.
    """
    soft = build_graph(sample.rest_mesh)
    target = sample.deformed_mesh.vertices
    index_map = np.arange(soft.n_nodes)
    if patch_size is not None:
        if len(sample.contact_points) == 0:
            raise SkipSample(f"sample {key or sample.scenario_seed} has no contact points to anchor a patch")
        if patch_size < soft.n_nodes:
            soft, index_map = extract_patch(soft, sample.contact_points.mean(axis=0), patch_size)
            target = target[index_map]
    rigid = build_graph(sample.rigid.world_mesh())
    soft_n, rigid_n, transform = normalize_pair(soft, rigid)
    return TrainingInstance(soft_n, rigid_n, sample.rigid.applied_force, transform.apply(target),
                            transform, index_map, key)


def load_instances(root, keys, patch_size):
    """Instances for ``keys``; samples that cannot form one are logged and left out."""
    out, skipped = [], []
    for k in keys:
        try:
            out.append(make_training_instance(load_sample(Path(root) / k), patch_size, key=k))
        except SkipSample as exc:
            logger.warning("skipping %s: %s", k, exc)
            skipped.append(k)
    return out, skipped


def displacement_rms(instances):
    """Root-mean-square target displacement per coordinate, in normalized units."""
    sq = sum(float(np.sum((i.target - i.soft_graph.positions) ** 2)) for i in instances)
    n = sum(i.target.size for i in instances)
    return float(np.sqrt(sq / n)) if n else 0.0


def resolve_model_config(config, train_set):
    if config.output_scale == "auto":
        rms = displacement_rms(train_set)
        scale = rms if rms > 0 else 1.0
    else:
        scale = float(config.output_scale)
    return replace(config.model, output_scale=scale)


# ----------------------------------------------------------------------------
# optimizer

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.values) for k, v in params.vars.items()}
        self.v = {k: np.zeros_like(v.values) for k, v in params.vars.items()}

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.vars.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.values = (p.values - update).astype(p.values.dtype, copy=False)


# ----------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    final_checkpoint: Path | None
    best_checkpoint: Path | None
    log: list
    params: object = field(repr=False, default=None)
    skipped: list = field(default_factory=list)


def _batch_step(params, batch, config, dtype):
    params.zero_grad()
    reports = []
    total = None
    for inst in batch:
        pred = forward_prepared(inst.inputs(config.ablation, dtype), params)
        rep = total_loss(pred, inst.target, inst.soft_graph, config.lambda_g)
        reports.append(rep)
        total = rep.total if total is None else ad.add(total, rep.total)
    ad.backward(ad.scale(total, 1.0 / len(batch)))
    return reports


def train_instances(config, train_set, select_set=None, out_dir=None, tag="model", metadata=None):
    """Fit one network on prepared instances. Returns :class:`TrainResult`."""
    if not train_set:
        raise InvalidArgumentError("training split is empty")
    dtype = np.dtype(config.dtype)
    params = init_params(resolve_model_config(config, train_set), seed=config.seed, dtype=dtype)
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    out_dir = Path(out_dir) if out_dir else None
    meta = {"train_config": config.as_dict(), "patch_size": config.patch_size,
            "ablation": config.ablation, "tag": tag, **(metadata or {})}
    best, best_path, log = np.inf, None, []
    steps_per_epoch = -(-len(train_set) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_set))
        sums = np.zeros(3)
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_set[i] for i in order[start:start + config.batch_size]]
            try:
                reports = _batch_step(params, batch, config, dtype)
                opt.lr = scheduled_lr(config.learning_rate, config.lr_schedule,
                                      epoch * steps_per_epoch + b, total_steps)
                opt.step()
            except NumericFaultError as exc:
                raise NumericFaultError(f"epoch {epoch} batch {b}: {exc}") from exc
            for r in reports:
                sums += (r.l_mse, r.l_graph, r.l_total)
        row = dict(zip(("l_mse", "l_graph", "l_total"), (sums / len(train_set)).tolist()))
        row["epoch"] = epoch
        if select_set:
            row["select_mse"] = float(np.mean([m["mse"] for m in
                                               _score(params, select_set, config.ablation)]))
        row["seconds"] = time.perf_counter() - t0
        log.append(row)
        logger.info("%s epoch %d: %s", tag, epoch, row)
        if out_dir is not None:
            score = row.get("select_mse", row["l_total"])
            if score < best:
                best = score
                best_path = save_checkpoint(out_dir / "best.npz", params, epoch=epoch, score=score, **meta)
    final_path = None
    if out_dir is not None:
        final_path = save_checkpoint(out_dir / "final.npz", params, epoch=config.epochs - 1, **meta)
        (out_dir / "train_log.json").write_text(json.dumps(log, indent=1) + "\n")
    return TrainResult(final_path, best_path, log, params)


def train(config, data_root, scope="all", objects=None):
    """Train on a dataset directory.

    ``scope="per-object"`` fits one network per object (checkpoints under
    ``<checkpoint_dir>/<object>/``); ``"all"`` fits one for everything
    (``<checkpoint_dir>/all/``). Returns ``{tag: TrainResult}``.
    """
    if scope not in ("all", "per-object"):
        raise InvalidArgumentError(f"scope must be 'all' or 'per-object', got {scope!r}")
    manifest = load_manifest(data_root)
    names = objects or list(manifest["objects"])
    groups = {"all": names} if scope == "all" else {n: [n] for n in names}
    results = {}
    for tag, group in groups.items():
        train_keys = split_keys(manifest, "train", group)
        if not train_keys:
            raise InvalidArgumentError(f"training split is empty for {tag}")
        train_set, skipped = load_instances(data_root, train_keys, config.patch_size)
        select_set = None
        if config.select_on:
            select_set, more = load_instances(data_root, split_keys(manifest, config.select_on, group),
                                              config.patch_size)
            skipped += more
        out = Path(config.checkpoint_dir) / tag if config.checkpoint_dir else None
        res = train_instances(config, train_set, select_set, out, tag,
                              {"objects": group, "data": str(data_root)})
        res.skipped = skipped
        results[tag] = res
    return results


# ----------------------------------------------------------------------------
# evaluation

def _predict(params, inst, ablation="both"):
    return forward_prepared(inst.inputs(ablation, params.dtype), params).values


def _metrics(pred, inst):
    pred = np.asarray(pred, dtype=np.float64)
    truth_graph = inst.soft_graph.with_positions(inst.target)
    return {
        "mse": float(mse_loss(pred, inst.target).values),
        "mae": mae_metric(pred, inst.target),
        "consistency": float(graph_consistency(inst.soft_graph, pred).values),
        "consistency_vs_truth": float(graph_consistency(truth_graph, pred).values),
        "baseline_mse": float(mse_loss(inst.soft_graph.positions, inst.target).values),
    }


def _score(params, instances, ablation="both"):
    return [_metrics(_predict(params, inst, ablation), inst) for inst in instances]


METRIC_KEYS = ("mse", "mae", "consistency", "consistency_vs_truth", "baseline_mse")


@dataclass
class EvalReport:
    rows: list
    aggregate: dict
    timings: dict
    split: str = "test"
    checkpoint: str | None = None

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_samples(cls, per_sample, timings, split="test", checkpoint=None):
        by_object = {}
        for obj, m in per_sample:
            by_object.setdefault(obj, []).append(m)
        rows = []
        for obj in sorted(by_object):
            ms = by_object[obj]
            row = {"object": obj, "n": len(ms)}
            row.update({k: float(np.mean([m[k] for m in ms])) for k in METRIC_KEYS})
            rows.append(row)
        agg = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_KEYS} if rows else {}
        return cls(rows, agg, timings, split, checkpoint)


def evaluate(checkpoint, data_root, split="test", patch_size="checkpoint", batch_size=4,
             predictor=None, objects=None):
    """Per-object metrics over a split, in normalized coordinates.

    ``checkpoint`` is a path or loaded ModelParams. ``predictor`` overrides the
    network: ``"truth"`` (oracle injection), ``"rest"`` (zero-deformation
    baseline) or a callable ``instance -> (N, 3) positions``.
    """
    if isinstance(checkpoint, (str, Path)):
        params, meta = load_checkpoint(checkpoint)
        ckpt_name = str(checkpoint)
    else:
        params, meta, ckpt_name = checkpoint, {}, None
    if patch_size == "checkpoint":
        patch_size = meta.get("patch_size")
    ablation = meta.get("ablation", "both")
    manifest = load_manifest(data_root)
    keys = split_keys(manifest, split, objects)
    if not keys:
        raise InvalidArgumentError(f"split {split!r} is empty")
    if predictor == "truth":
        predictor = lambda inst: inst.target  # noqa: E731
    elif predictor == "rest":
        predictor = lambda inst: inst.soft_graph.positions  # noqa: E731

    per_sample, data_ms, net_ms = [], [], []
    for start in range(0, len(keys), batch_size):
        t0 = time.perf_counter()
        batch, _ = load_instances(data_root, keys[start:start + batch_size], patch_size)
        for inst in batch:
            inst.inputs(ablation, params.dtype)
        t1 = time.perf_counter()
        preds = [predictor(inst) if predictor else _predict(params, inst, ablation) for inst in batch]
        t2 = time.perf_counter()
        data_ms.append(1e3 * (t1 - t0))
        net_ms.append(1e3 * (t2 - t1))
        per_sample += [(inst.object_name, _metrics(p, inst)) for inst, p in zip(batch, preds)]
    timings = {"data_ms": float(np.mean(data_ms)), "network_ms": float(np.mean(net_ms)),
               "batches": len(data_ms), "batch_size": batch_size}
    return EvalReport.from_samples(per_sample, timings, split, ckpt_name)


def run_ablation(data_root, config=None, objects=None):
    """Train the three encoding variants with identical seeds and compare them on the test split."""
    config = config or TrainConfig(epochs=10)
    manifest = load_manifest(data_root)
    names = objects or list(manifest["objects"])
    train_set, _ = load_instances(data_root, split_keys(manifest, "train", names), config.patch_size)
    test_set, _ = load_instances(data_root, split_keys(manifest, "test", names), config.patch_size)
    rows, inits = [], []
    for label, mode in ABLATION_ROWS.items():
        cfg = replace(config, ablation=mode, select_on="")
        inits.append(init_params(resolve_model_config(cfg, train_set), cfg.seed, np.dtype(cfg.dtype)))
        out = Path(config.checkpoint_dir) / f"ablation_{label}" if config.checkpoint_dir else None
        res = train_instances(cfg, train_set, None, out, f"ablation_{label}")
        scores = _score(res.params, test_set, mode) if test_set else []
        rows.append({"row": label, "ablation": mode,
                     "mse": float(np.mean([s["mse"] for s in scores])) if scores else None,
                     "mae": float(np.mean([s["mae"] for s in scores])) if scores else None,
                     "final_train_l_mse": res.log[-1]["l_mse"]})
    both = next(r for r in rows if r["row"] == "both")
    others = [r for r in rows if r["row"] != "both"]
    directional = both["mse"] is not None and all(both["mse"] <= r["mse"] for r in others)
    logger.info("ablation: both-best ordering %s", "holds" if directional else "does not hold")
    return {
        "rows": rows,
        "epochs": config.epochs,
        "seed": config.seed,
        "identical_init": all(p.equals(inits[0]) for p in inits[1:]),
        "both_best": directional,
        "n_train": len(train_set),
        "n_test": len(test_set),
    }


# ----------------------------------------------------------------------------
# runtime

def bench_instances(params, instances, batch_size=4, batches=20, ablation="both"):
    """Mean wall time per batch for input preparation and the forward pass."""
    if not instances:
        raise InvalidArgumentError("nothing to benchmark")
    data_ms, net_ms = [], []
    for b in range(batches):
        batch = [instances[(b * batch_size + i) % len(instances)] for i in range(batch_size)]
        t0 = time.perf_counter()
        prepared = [prepare_inputs(i.soft_graph, i.rigid_graph, i.force, ablation, params.dtype)
                    for i in batch]
        t1 = time.perf_counter()
        for p in prepared:
            forward_prepared(p, params)
        t2 = time.perf_counter()
        data_ms.append(1e3 * (t1 - t0))
        net_ms.append(1e3 * (t2 - t1))
    return {"Data (ms)": float(np.mean(data_ms)), "Network (ms)": float(np.mean(net_ms)),
            "batches": batches, "batch_size": batch_size,
            "nodes_per_sample": int(np.mean([i.soft_graph.n_nodes for i in instances])),
            "max_network_ms": float(np.max(net_ms))}


def bench(checkpoint, data_root, batches=20, batch_size=4, patch_size="checkpoint", split="test"):
    params, meta = load_checkpoint(checkpoint)
    if patch_size == "checkpoint":
        patch_size = meta.get("patch_size")
    manifest = load_manifest(data_root)
    keys = split_keys(manifest, split)[: batches * batch_size]
    instances, _ = load_instances(data_root, keys, patch_size)
    return bench_instances(params, instances, batch_size, batches, meta.get("ablation", "both"))


# ----------------------------------------------------------------------------
# inference on files

def predict_files(rest_path, rigid_path, meta_path, checkpoint, out_path):
    """Deform ``rest_path`` and write the result as OBJ with the rest face list.

    ``meta_path`` needs ``force_dir`` and ``force_mag``; ``contact_points``
    is required only for patch checkpoints, which update just the patch
    around the contact centroid and leave every other vertex at rest.
    """
    params, ck_meta = load_checkpoint(checkpoint)
    rest = load_mesh(rest_path)
    meta = read_meta(meta_path)
    force = ForceDescriptor(meta_field(meta, "force_dir", (3,)), float(meta_field(meta, "force_mag", ())))
    points = meta_field(meta, "contact_points", (None, 3)) if "contact_points" in meta else np.zeros((0, 3))
    rigid = RigidCollider(load_mesh(rigid_path), applied_force=force)
    sample = ContactSample(rest, rest, rigid, points, np.full(len(points), 0), 0)
    inst = make_training_instance(sample, ck_meta.get("patch_size"))
    inputs = inst.inputs(ck_meta.get("ablation", "both"), params.dtype)
    # displacement in normalized units, so a zero prediction reproduces the rest mesh exactly
    delta = forward_prepared(inputs, params).values - inputs.rest
    out = rest.vertices.copy()
    out[inst.index_map] += delta.astype(np.float64) * inst.transform.scale
    save_obj(rest.with_vertices(out), out_path)
    return Path(out_path)
