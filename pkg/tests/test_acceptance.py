"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected and printed again in the pytest terminal summary.
The scale-down learning experiment (criterion 7) needs hours of CPU and
runs only with ``DEFORMCAST_FULL=1``.
"""

import os
import time

import numpy as np
import pytest

from deformcast import autodiff as ad
from deformcast import shapes
from deformcast.autodiff import Var
from deformcast.dataset import generate_dataset, load_manifest, load_sample, samples_equal, split_keys, write_sample
from deformcast.encoding import RIGID_WIDTH, SOFT_WIDTH, ForceDescriptor, encode_rigid, encode_soft
from deformcast.losses import graph_consistency, mse_loss, total_loss
from deformcast.mesh import build_graph, normalize_pair
from deformcast.model import (
    ModelConfig,
    cross_attention,
    forward,
    forward_prepared,
    init_params,
    linear,
    load_checkpoint,
    mlp,
    prepare_inputs,
    save_checkpoint,
    tagconv_forward,
)
from deformcast.sim import RigidCollider, SimConfig, SoftBodyState, run_simulation
from deformcast.train import TrainConfig, bench_instances, evaluate, load_instances, run_ablation, train, train_instances

from conftest import kink_safe_difference, random_mesh

RESULTS = {}
FULL = os.environ.get("DEFORMCAST_FULL") == "1"


def record(n, name, ok, detail):
    line = f"[{n:>2}/10] {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ----------------------------------------------------------------------------
# 1. gradients

def fd_max_rel_error(build, xs, rng):
    """Largest elementwise relative error of reverse-mode vs central differences
    for ``sum(w * build(*xs))`` over every entry of every input."""
    out_w = rng.normal(size=build(*[Var(x) for x in xs]).values.shape)

    def value():
        return float(np.sum(out_w * build(*[Var(x) for x in xs]).values))

    vars_ = [Var(x.copy(), requires_grad=True) for x in xs]
    ad.backward(ad.sum_all(ad.mul(build(*vars_), out_w)))
    worst = 0.0
    for v, x in zip(vars_, xs):
        flat = x.reshape(-1)
        g = v.grad.reshape(-1)
        for i in range(flat.size):
            num = kink_safe_difference(value, flat, i)
            denom = max(abs(num), abs(g[i]))
            if denom > 1e-7:  # entries with no gradient are judged absolutely below
                worst = max(worst, abs(num - g[i]) / denom)
            else:
                worst = max(worst, abs(num - g[i]) / 1e-7 * 1e-4)
    return worst


def gradient_cases(rng):
    g = build_graph(random_mesh(rng, 40))
    adj = ad.build_adjacency(g)
    n = g.n_nodes
    cfg = ModelConfig(hidden=8, tag_hops=2, encoder_layers=1, decoder_layers=1, heads=2)
    rest = g
    truth = g.positions + 0.1 * rng.normal(size=g.positions.shape)
    return {
        "matmul": (ad.matmul, [(3, 4), (4, 2)]),
        "add": (ad.add, [(3, 4), (4,)]),
        "sub": (ad.sub, [(3, 4), (1, 4)]),
        "mul": (ad.mul, [(3, 4), (3, 4)]),
        "scale": (lambda a: ad.scale(a, -1.3), [(3, 4)]),
        "relu": (ad.relu, [(4, 5)]),
        "softmax_rows": (ad.softmax_rows, [(3, 5)]),
        "concat_cols": (ad.concat_cols, [(3, 2), (3, 3)]),
        "transpose": (ad.transpose, [(3, 4)]),
        "spmm": (lambda x: ad.spmm(adj, x), [(n, 3)]),
        "mean_all": (ad.mean_all, [(3, 4)]),
        "sum_all": (ad.sum_all, [(3, 4)]),
        "sum_rows": (ad.sum_rows, [(3, 4)]),
        "row_norms": (ad.row_norms, [(5, 3)]),
        "linear": (linear, [(5, 4), (4, 3), (3,)]),
        "mlp": (lambda x, w0, b0, w1, b1: mlp(x, {"m.0.W": w0, "m.0.b": b0, "m.1.W": w1, "m.1.b": b1}, "m"),
                [(5, 4), (4, 6), (6,), (6, 3), (3,)]),
        "tagconv": (lambda x, w0, w1, w2, b: tagconv_forward(x, adj, [w0, w1, w2], b),
                    [(n, 4), (4, 3), (4, 3), (4, 3), (3,)]),
        "cross_attention": (lambda s, r, *w: cross_attention(s, r, _attention_params(w), cfg),
                            [(6, 8), (5, 8)] + [(8, 4)] * 6 + [(8, 8), (8,)]),
        "mse_loss": (lambda a: mse_loss(a, truth), [(n, 3)]),
        "graph_consistency": (lambda a: graph_consistency(rest, a), [(n, 3)]),
        "total_loss": (lambda a: total_loss(a, truth, rest, 0.1).total, [(n, 3)]),
    }


def _attention_params(w):
    names = [f"attention.{proj}.{h}" for h in range(2) for proj in ("q", "k", "v")] + ["attention.o.W", "attention.o.b"]
    return dict(zip(names, w))


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for name, (build, shapes_) in gradient_cases(rng).items():
            xs = [rng.normal(size=s) for s in shapes_]
            err = fd_max_rel_error(build, xs, rng)
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    # the assembled network end to end, all parameters, one seed per run
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        soft, rigid = build_graph(random_mesh(rng, 12)), build_graph(random_mesh(rng, 10))
        soft, rigid, _ = normalize_pair(soft, rigid)
        cfg = ModelConfig(hidden=4, tag_hops=1, encoder_layers=1, decoder_layers=1, heads=2)
        p = init_params(cfg, seed=seed)
        inputs = prepare_inputs(soft, rigid, ForceDescriptor.from_vector(rng.normal(size=3)))
        names = list(p.vars)
        for name in names[:: max(1, len(names) // 6)]:
            def build(w, name=name):
                q = p.copy()
                q.vars[name] = w
                return forward_prepared(inputs, q)
            err = fd_max_rel_error(build, [p[name].values.copy()], rng)
            if err > worst:
                worst, where = err, f"forward/{name} seed {seed}"
    dt = time.perf_counter() - t0
    record(1, "gradient correctness", worst < 1e-4 and dt < 120,
           f"max rel err {worst:.2e} ({where}), {dt:.1f} s")


# ----------------------------------------------------------------------------
# 2. graph construction

def test_2_graph_construction_oracle():
    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(100):
        mesh = random_mesh(rng, 500)
        pairs = set()
        for a, b, c in mesh.faces.tolist():
            for i, j in ((a, b), (b, c), (c, a)):
                pairs.add((min(i, j), max(i, j)))
        if sorted(map(tuple, build_graph(mesh).edges.tolist())) != sorted(pairs):
            bad += 1
    record(2, "graph construction oracle", bad == 0, f"{100 - bad}/100 meshes match brute force")


# ----------------------------------------------------------------------------
# 3. loss identities

def test_3_loss_identities():
    rng = np.random.default_rng(3)
    zero_mse = zero_graph = 0.0
    shift = decomp = 0.0
    for _ in range(20):
        g = build_graph(random_mesh(rng, 80))
        x = rng.normal(size=g.positions.shape)
        zero_mse = max(zero_mse, abs(float(mse_loss(x, x).values)))
        zero_graph = max(zero_graph, abs(float(graph_consistency(g, g.positions).values)))
        pred = g.positions + 0.05 * rng.normal(size=x.shape)
        t = rng.normal(size=3) * 10
        shift = max(shift, abs(float(graph_consistency(g, pred).values) - float(graph_consistency(g, pred + t).values)))
        lam = float(rng.uniform(0, 2))
        r = total_loss(pred, x, g, lam)
        decomp = max(decomp, abs(r.l_total - (r.l_mse + lam * r.l_graph)) / abs(r.l_total))
        decomp = max(decomp, abs(float(r.total.values) - r.l_total) / abs(r.l_total))
    ok = zero_mse == 0.0 and zero_graph == 0.0 and shift < 1e-12 and decomp < 1e-9
    record(3, "loss identities", ok,
           f"L_mse(x,x)={zero_mse}, L_G(rest,rest)={zero_graph}, translation drift {shift:.1e}, "
           f"L_T decomposition rel {decomp:.1e}")


# ----------------------------------------------------------------------------
# 4. feature widths

def test_4_feature_width_contract():
    soft = build_graph(shapes.soft_object("ball")[0])
    rigid = build_graph(shapes.collider("sphere"))
    soft, rigid, _ = normalize_pair(soft, rigid)
    force = ForceDescriptor(np.array([0.0, 0.0, -1.0]), 4.0)
    fs, fr = encode_soft(soft).matrix, encode_rigid(rigid, force).matrix
    cfg = ModelConfig()
    inputs = prepare_inputs(soft, rigid, force)
    p = init_params(cfg)
    hidden = p["soft_embed.0.W"].shape[1]
    rejected = False
    try:
        from deformcast.encoding import NodeFeatures

        NodeFeatures(np.zeros((4, 20)), "soft")
    except Exception:
        rejected = True
    ok = (fs.shape[1], fr.shape[1], SOFT_WIDTH, RIGID_WIDTH, cfg.hidden, hidden) == (21, 25, 21, 25, 256, 256)
    ok = ok and inputs.soft_features.shape[1] == 21 and inputs.rigid_features.shape[1] == 25 and rejected
    record(4, "feature-width contract", ok,
           f"soft {fs.shape[1]}, rigid {fr.shape[1]}, hidden {hidden}, wrong width rejected: {rejected}")


# ----------------------------------------------------------------------------
# 5. cloth

CLOTH_CONFIG = SimConfig(gravity=(0.0, -9.81, 0.0), duration=2.0, substeps=16, solver_iterations=10)


def cloth_run(seed):
    g = shapes.grid(32, 32, (2.0, 2.0))
    v = g.vertices.copy()
    v[:, 1] += 2.0
    cloth = g.with_vertices(v)
    top = np.flatnonzero(np.isclose(v[:, 1], v[:, 1].max()))
    state = SoftBodyState.from_mesh(cloth, 1.0, 0.02, top)
    ball = RigidCollider(shapes.icosphere(3, 1.0), translation=[0.0, 1.5, -1.2], velocity=[0.0, 0.0, 0.7],
                         stop_time=1.0)
    t0 = time.perf_counter()
    run = run_simulation(state, ball, CLOTH_CONFIG, seed=seed)
    return state, run, time.perf_counter() - t0


def test_5_pbd_solver_quality():
    state, a, secs = cloth_run(seed=5)
    _, b, secs_b = cloth_run(seed=5)
    viol = max(state.constraint_violation(a.capture_positions).max(),
               state.constraint_violation(a.final_positions).max())
    ground = min(a.capture_positions[:, 1].min(), a.final_positions[:, 1].min())
    same = (np.array_equal(a.capture_positions, b.capture_positions)
            and np.array_equal(a.final_positions, b.final_positions) and a.capture_frame == b.capture_frame)
    hit = int(a.contact_counts.max())
    ok = viol < 0.01 and ground >= 0.0 and same and max(secs, secs_b) < 30 and hit > 0
    record(5, "PBD solver quality", ok,
           f"{state.particles.shape[0]} particles, {hit} max contacts, max violation {100 * viol:.2f}%, "
           f"min height {ground:.3f}, bitwise repeat {same}, {max(secs, secs_b):.1f} s "
           f"({CLOTH_CONFIG.substeps} substeps x {CLOTH_CONFIG.solver_iterations} iterations)")


# ----------------------------------------------------------------------------
# 6. overfit

OVERFIT_PATCH = 512


@pytest.fixture(scope="module")
def ball_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ball")
    generate_dataset(["ball"], 10, 11, root)
    return root


def test_6_overfit_sanity(ball_dataset):
    m = load_manifest(ball_dataset)
    insts, _ = load_instances(ball_dataset, split_keys(m, "train")[:8], OVERFIT_PATCH)
    # capacity check: the regularizer is off because its minimizer is not the ground truth
    cfg = TrainConfig(epochs=500, patch_size=OVERFIT_PATCH, lambda_g=0.0, select_on="")
    t0 = time.perf_counter()
    res = train_instances(cfg, insts)
    secs = time.perf_counter() - t0
    final = res.log[-1]["l_mse"]
    base = float(np.mean([np.mean(np.sum((i.target - i.soft_graph.positions) ** 2, 1)) for i in insts]))
    record(6, "overfit sanity", final < 1e-5 and secs < 600 and len(insts) == 8,
           f"{len(insts)} samples, patch {OVERFIT_PATCH}, final train L_mse {final:.2e} "
           f"(rest baseline {base:.2e}), {secs:.0f} s")


# ----------------------------------------------------------------------------
# 7. learning signal at scale-down

@pytest.mark.slow
@pytest.mark.skipif(not FULL, reason="hours of CPU; set DEFORMCAST_FULL=1")
def test_7_learning_signal(tmp_path_factory):
    out = os.environ.get("DEFORMCAST_FULL_DIR")
    root = tmp_path_factory.mktemp("full") if not out else __import__("pathlib").Path(out)
    t0 = time.perf_counter()
    if not (root / "data" / "manifest.json").is_file():
        generate_dataset(list(shapes.SOFT_OBJECTS), 200, 0, root / "data")
    gen = time.perf_counter() - t0
    cfg = TrainConfig(epochs=40, batch_size=4, patch_size=1024, checkpoint_dir=str(root / "ckpt"))
    res = train(cfg, root / "data")["all"]
    rep = evaluate(res.final_checkpoint, root / "data", "test")
    secs = time.perf_counter() - t0
    mse, base = rep.aggregate["mse"], rep.aggregate["baseline_mse"]
    record(7, "learning signal at scale-down", mse < 0.5 * base and secs <= 4 * 3600,
           f"test MSE {mse:.3e} vs rest baseline {base:.3e} (ratio {mse / base:.3f}); "
           f"reference average MSE 0.000119, not comparable; data {gen / 60:.0f} min, total {secs / 3600:.2f} h")


# ----------------------------------------------------------------------------
# 8. ablation harness

def test_8_ablation_harness(ball_dataset, tmp_path):
    cfg = TrainConfig(epochs=10, patch_size=256, seed=0)
    rep = run_ablation(ball_dataset, cfg)
    rows = {r["row"]: r for r in rep["rows"]}
    ok = (list(rows) == ["only_physics", "only_positional", "both"] and rep["identical_init"]
          and all(r["mse"] is not None for r in rows.values()))
    order = "holds" if rep["both_best"] else "does not hold"
    record(8, "ablation harness", ok,
           "10 epochs, identical init; test MSE " + ", ".join(f"{k} {r['mse']:.2e}" for k, r in rows.items())
           + f"; both-best ordering {order} (logged, not asserted)")


# ----------------------------------------------------------------------------
# 9. runtime

def test_9_runtime_benchmark(ball_dataset):
    m = load_manifest(ball_dataset)
    keys = split_keys(m, "train")[:4]
    p = init_params(ModelConfig(output_scale=0.01), seed=0, dtype=np.float32)
    big, _ = load_instances(ball_dataset, keys, 1024)
    small, _ = load_instances(ball_dataset, keys, 64)
    bench_instances(p, big, 4, 1)  # warm caches
    rb = bench_instances(p, big, 4, 5)
    rs = bench_instances(p, small, 4, 5)
    cols = {"Data (ms)", "Network (ms)"} <= set(rb)
    ok = rb["max_network_ms"] < 500 and rs["max_network_ms"] < 100 and cols
    record(9, "runtime benchmark", ok,
           f"4x1024 forward {rb['Network (ms)']:.0f} ms (max {rb['max_network_ms']:.0f}), "
           f"4x64 forward {rs['Network (ms)']:.1f} ms (max {rs['max_network_ms']:.1f}), "
           f"data prep {rb['Data (ms)']:.0f} ms; reference GPU figures 1.661 / 4.261 ms not comparable")


# ----------------------------------------------------------------------------
# 10. equivariance and round trips

def test_10_equivariance_and_round_trips(ball_dataset, tmp_path):
    rng = np.random.default_rng(10)
    cfg = ModelConfig(hidden=16, tag_hops=2, encoder_layers=2, decoder_layers=2, heads=4)
    worst = 0.0
    for case in range(20):
        soft = build_graph(random_mesh(rng, 60))
        rigid = build_graph(random_mesh(rng, 30))
        soft, rigid, _ = normalize_pair(soft, rigid)
        force = ForceDescriptor.from_vector(rng.normal(size=3))
        p = init_params(cfg, seed=case)
        out = forward(soft, rigid, force, p).values
        perm = rng.permutation(soft.n_nodes)
        inv = np.argsort(perm)
        permuted = soft.__class__(soft.positions[perm], inv[soft.edges])
        out_p = forward(permuted, rigid, force, p).values
        worst = max(worst, float(np.abs(out_p - out[perm]).max()))
    equivariant = worst < 1e-10

    ckpt_ok = 0
    for case in range(20):
        p = init_params(cfg, seed=1000 + case)
        a = save_checkpoint(tmp_path / f"c{case}.npz", p, case=case)
        q, meta = load_checkpoint(a)
        b = save_checkpoint(tmp_path / f"d{case}.npz", q, **meta)
        ckpt_ok += q.equals(p) and meta == {"case": case} and a.read_bytes() == b.read_bytes()

    m = load_manifest(ball_dataset)
    data_ok, n_data = 0, 0
    for i, key in enumerate(sorted(m["samples"])):
        s = load_sample(ball_dataset / key)
        write_sample(s, tmp_path / "rt" / key, {"collider": m["samples"][key].get("collider", "")})
        t = load_sample(tmp_path / "rt" / key)
        same_files = all((ball_dataset / key / f).read_bytes() == (tmp_path / "rt" / key / f).read_bytes()
                         for f in ("rest.obj", "deformed.obj", "rigid.obj"))
        data_ok += samples_equal(s, t) and same_files
        n_data += 1
    # pad to 20 round-trip cases with freshly perturbed copies
    base = load_sample(ball_dataset / sorted(m["samples"])[0])
    while n_data < 20:
        s = load_sample(ball_dataset / sorted(m["samples"])[0])
        s.deformed_mesh = s.deformed_mesh.with_vertices(base.deformed_mesh.vertices + rng.normal(size=base.deformed_mesh.vertices.shape) * 1e-3)
        write_sample(s, tmp_path / "extra" / str(n_data))
        data_ok += samples_equal(s, load_sample(tmp_path / "extra" / str(n_data)))
        n_data += 1
    ok = equivariant and ckpt_ok == 20 and data_ok == n_data
    record(10, "equivariance and round trips", ok,
           f"20 permutations max deviation {worst:.1e}; checkpoints {ckpt_ok}/20 bitwise; "
           f"dataset samples {data_ok}/{n_data} bitwise")
