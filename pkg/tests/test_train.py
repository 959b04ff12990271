import json

import numpy as np
import pytest

from deformcast.dataset import load_sample
from deformcast.errors import InvalidArgumentError, NumericFaultError, SkipSample, WidthMismatchError
from deformcast.mesh import load_mesh
from deformcast.model import ModelConfig, init_params, load_checkpoint, save_checkpoint
from deformcast.train import (
    Adam,
    EvalReport,
    TrainConfig,
    bench,
    displacement_rms,
    evaluate,
    load_instances,
    make_training_instance,
    predict_files,
    run_ablation,
    train,
    train_instances,
)

TOY = ModelConfig(hidden=8, tag_hops=2, encoder_layers=2, decoder_layers=2, heads=2)


def toy_config(**kw):
    base = dict(epochs=2, batch_size=4, patch_size=64, seed=3, model=TOY, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"epochs": 0}, {"batch_size": 0}, {"learning_rate": 0.0},
                                    {"lambda_g": -1.0}, {"ablation": "neither"}, {"patch_size": 0},
                                    {"output_scale": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)

    def test_defaults(self):
        c = TrainConfig()
        assert (c.epochs, c.batch_size, c.learning_rate, c.lambda_g) == (40, 4, 1e-3, 0.1)


class TestInstances:
    @pytest.fixture
    def sample(self, small_dataset):
        root, _ = small_dataset
        return load_sample(root / "ball" / "0002")

    def test_full_mesh(self, sample):
        inst = make_training_instance(sample)
        assert inst.target.shape == sample.rest_mesh.vertices.shape
        assert np.array_equal(inst.index_map, np.arange(sample.rest_mesh.n_vertices))

    @pytest.mark.parametrize("k", [1024, 64])
    def test_patch_sizes(self, sample, k):
        inst = make_training_instance(sample, k)
        assert inst.target.shape == (k, 3) and inst.soft_graph.n_nodes == k
        assert inst.inputs().soft_features.shape == (k, 21)
        assert inst.inputs().rigid_features.shape[1] == 25

    def test_patch_is_near_contacts(self, sample):
        inst = make_training_instance(sample, 64)
        anchor = sample.contact_points.mean(axis=0)
        d = np.linalg.norm(sample.rest_mesh.vertices - anchor, axis=1)
        assert np.sort(d[inst.index_map]).max() <= np.sort(d)[63]

    def test_targets_share_normalization(self, sample):
        inst = make_training_instance(sample, 256)
        np.testing.assert_allclose(inst.transform.invert(inst.target),
                                   sample.deformed_mesh.vertices[inst.index_map], atol=1e-12)
        np.testing.assert_allclose(inst.transform.invert(inst.rigid_graph.positions),
                                   sample.rigid.world_vertices(), atol=1e-12)

    def test_no_contacts_skips_patch(self, sample):
        sample.contact_points = np.zeros((0, 3))
        sample.contact_node_indices = np.zeros(0, np.int64)
        with pytest.raises(SkipSample):
            make_training_instance(sample, 64)
        assert make_training_instance(sample).target.shape[0] == sample.rest_mesh.n_vertices


class TestAdam:
    def test_first_step_by_hand(self):
        p = init_params(TOY, seed=0)
        before = p["decoder.out.W"].values.copy()
        for v in p.vars.values():
            v.grad = np.full_like(v.values, 0.5)
        Adam(p, lr=0.01).step()
        # bias-corrected first step moves each weight by lr * sign(g)
        np.testing.assert_allclose(p["decoder.out.W"].values, before - 0.01, rtol=1e-6)

    def test_minimizes_quadratic(self):
        from deformcast import autodiff as ad

        p = init_params(TOY, seed=1)
        opt = Adam(p, lr=0.05)
        w = p["decoder.out.b"]
        target = np.array([0.3, -0.2, 0.7])
        for _ in range(300):
            p.zero_grad()
            d = ad.sub(w, target)
            ad.backward(ad.sum_all(ad.mul(d, d)))
            opt.step()
        np.testing.assert_allclose(w.values, target, atol=1e-3)


class TestTrain:
    def test_deterministic(self, small_dataset):
        root, _ = small_dataset
        a = train(toy_config(), root)["all"]
        b = train(toy_config(), root)["all"]
        assert [r["l_total"] for r in a.log] == [r["l_total"] for r in b.log]
        assert a.params.equals(b.params)

    def test_log_fields(self, small_dataset):
        root, _ = small_dataset
        log = train(toy_config(), root)["all"].log
        assert len(log) == 2
        for row in log:
            assert {"l_mse", "l_graph", "l_total", "select_mse", "epoch"} <= set(row)
            assert abs(row["l_total"] - (row["l_mse"] + 0.1 * row["l_graph"])) < 1e-9 * row["l_total"]

    def test_per_object_checkpoints(self, small_dataset, tmp_path):
        root, _ = small_dataset
        res = train(toy_config(checkpoint_dir=str(tmp_path)), root, scope="per-object")
        assert sorted(res) == ["ball", "donut"]
        for name in ("ball", "donut"):
            assert (tmp_path / name / "final.npz").is_file() and (tmp_path / name / "best.npz").is_file()
            _, meta = load_checkpoint(tmp_path / name / "final.npz")
            assert meta["objects"] == [name] and meta["patch_size"] == 64

    def test_output_scale_from_data(self, small_dataset):
        root, m = small_dataset
        res = train(toy_config(epochs=1), root)["all"]
        insts, _ = load_instances(root, m["split"]["train"], 64)
        assert res.params.config.output_scale == pytest.approx(displacement_rms(insts))

    def test_empty_split(self, small_dataset):
        root, _ = small_dataset
        with pytest.raises(InvalidArgumentError):
            train(toy_config(), root, objects=["nothing"])
        with pytest.raises(InvalidArgumentError):
            train_instances(toy_config(), [])

    def test_numeric_fault_names_epoch_and_batch(self, small_dataset):
        root, m = small_dataset
        insts, _ = load_instances(root, m["split"]["train"][:2], 64)
        insts[1].target = np.full_like(insts[1].target, np.inf)
        with pytest.raises(NumericFaultError, match="epoch 0 batch 0"):
            train_instances(toy_config(batch_size=2, output_scale=1.0), insts)

    def test_training_reduces_loss(self, small_dataset):
        root, m = small_dataset
        insts, _ = load_instances(root, m["split"]["train"][:4], 64)
        res = train_instances(toy_config(epochs=30, learning_rate=3e-3), insts)
        assert res.log[-1]["l_mse"] < 0.5 * res.log[0]["l_mse"]


@pytest.fixture(scope="module")
def ckpt(small_dataset, tmp_path_factory):
    root, _ = small_dataset
    out = tmp_path_factory.mktemp("ckpt")
    train(toy_config(checkpoint_dir=str(out)), root)
    return out / "all" / "final.npz"


class TestEvaluate:
    def test_oracle_injection(self, ckpt, small_dataset):
        r = evaluate(ckpt, small_dataset[0], predictor="truth")
        assert r.aggregate["mse"] == 0.0 and r.aggregate["mae"] == 0.0
        assert r.aggregate["consistency_vs_truth"] == 0.0

    def test_rest_baseline_equals_mean_squared_deformation(self, ckpt, small_dataset):
        root, m = small_dataset
        r = evaluate(ckpt, root, split="train", predictor="rest")
        for row in r.rows:
            keys = [k for k in m["split"]["train"] if k.startswith(row["object"] + "/")]
            direct = []
            for k in keys:
                inst = make_training_instance(load_sample(root / k), 64)
                direct.append(np.mean(np.sum((inst.target - inst.soft_graph.positions) ** 2, axis=1)))
            assert row["mse"] == pytest.approx(np.mean(direct), rel=1e-12)
            assert row["baseline_mse"] == pytest.approx(row["mse"], rel=1e-12)
            assert row["consistency"] == 0.0

    def test_aggregate_is_mean_of_rows(self, ckpt, small_dataset):
        r = evaluate(ckpt, small_dataset[0], split="train")
        assert [row["object"] for row in r.rows] == ["ball", "donut"]
        for k, v in r.aggregate.items():
            assert abs(v - np.mean([row[k] for row in r.rows])) <= 1e-9 * max(abs(v), 1e-30)
        assert r.timings["data_ms"] >= 0 and r.timings["network_ms"] >= 0 and r.timings["batches"] == 2

    def test_checkpoint_round_trip_reproduces_metrics(self, ckpt, small_dataset, tmp_path):
        params, meta = load_checkpoint(ckpt)
        save_checkpoint(tmp_path / "copy.npz", params, **meta)
        a = evaluate(ckpt, small_dataset[0]).as_dict()
        b = evaluate(tmp_path / "copy.npz", small_dataset[0]).as_dict()
        for ra, rb in zip(a["rows"], b["rows"]):
            assert ra == rb

    def test_empty_split(self, ckpt, small_dataset):
        with pytest.raises(InvalidArgumentError):
            evaluate(ckpt, small_dataset[0], objects=["none"])

    def test_report_from_samples(self):
        rep = EvalReport.from_samples(
            [("a", {"mse": 1.0, "mae": 1.0, "consistency": 0.0, "consistency_vs_truth": 0.0, "baseline_mse": 2.0}),
             ("a", {"mse": 3.0, "mae": 1.0, "consistency": 0.0, "consistency_vs_truth": 0.0, "baseline_mse": 2.0}),
             ("b", {"mse": 6.0, "mae": 2.0, "consistency": 1.0, "consistency_vs_truth": 0.0, "baseline_mse": 2.0})],
            {})
        assert [r["mse"] for r in rep.rows] == [2.0, 6.0] and rep.aggregate["mse"] == 4.0

    def test_bench_columns(self, ckpt, small_dataset):
        rep = bench(ckpt, small_dataset[0], batches=2, split="train")
        assert rep["Data (ms)"] >= 0 and rep["Network (ms)"] > 0 and rep["batches"] == 2


class TestAblation:
    def test_rows_and_controlled_init(self, small_dataset):
        rep = run_ablation(small_dataset[0], toy_config(epochs=1))
        assert [r["row"] for r in rep["rows"]] == ["only_physics", "only_positional", "both"]
        assert rep["identical_init"] is True
        assert all(r["mse"] is not None and r["mae"] is not None for r in rep["rows"])
        assert isinstance(rep["both_best"], bool)
        json.dumps(rep)


class TestPredict:
    def test_zero_decoder_reproduces_rest(self, small_dataset, tmp_path):
        root, _ = small_dataset
        p = init_params(TOY, seed=0)
        arrays = p.arrays()
        arrays["decoder.out.W"][:] = 0
        arrays["decoder.out.b"][:] = 0
        ck = save_checkpoint(tmp_path / "zero.npz", p, patch_size=None)
        d = root / "donut" / "0001"
        out = predict_files(d / "rest.obj", d / "rigid.obj", d / "meta.json", ck, tmp_path / "pred.obj")
        pred, rest = load_mesh(out), load_mesh(d / "rest.obj")
        assert np.array_equal(pred.vertices, rest.vertices)
        assert np.array_equal(pred.faces, rest.faces)

    def test_patch_prediction_moves_only_patch(self, small_dataset, tmp_path):
        root, _ = small_dataset
        ck = save_checkpoint(tmp_path / "p.npz", init_params(TOY, seed=2), patch_size=64)
        d = root / "ball" / "0002"
        out = load_mesh(predict_files(d / "rest.obj", d / "rigid.obj", d / "meta.json", ck, tmp_path / "o.obj"))
        moved = np.flatnonzero(np.any(out.vertices != load_mesh(d / "rest.obj").vertices, axis=1))
        assert 0 < len(moved) <= 64

    def test_width_mismatch(self, small_dataset, tmp_path):
        root, _ = small_dataset
        ck = save_checkpoint(tmp_path / "w.npz", init_params(ModelConfig(hidden=8, heads=2, num_frequencies=2)))
        d = root / "ball" / "0002"
        with pytest.raises(WidthMismatchError):
            predict_files(d / "rest.obj", d / "rigid.obj", d / "meta.json", ck, tmp_path / "x.obj")


class TestSchedule:
    def test_cosine_endpoints(self):
        from deformcast.train import scheduled_lr

        assert scheduled_lr(1e-3, "cosine", 0, 10) == 1e-3
        assert scheduled_lr(1e-3, "cosine", 5, 10) == pytest.approx(5e-4)
        assert scheduled_lr(1e-3, "constant", 9, 10) == 1e-3

    def test_unknown_schedule(self):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(lr_schedule="step")
