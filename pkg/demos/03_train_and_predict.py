"""Small end-to-end run: dataset, training, evaluation, prediction.

Two objects with ten scenarios each is enough to see the loss fall and to
compare against the rest-pose baseline (predict no deformation at all). The
network here is a reduced one so the demo finishes in well under a minute;
`deformcast train` uses the full 256-wide model.

    python demos/03_train_and_predict.py [out_dir]
"""
import sys
from pathlib import Path

from deformcast.dataset import generate_dataset
from deformcast.mesh import load_mesh
from deformcast.model import ModelConfig
from deformcast.train import TrainConfig, evaluate, predict_files, train

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "small_run"

manifest = generate_dataset(["ball", "egg"], 10, base_seed=1, out_dir=out / "data")
print("dataset:", manifest["counts"])

cfg = TrainConfig(epochs=30, patch_size=256, learning_rate=1e-3, lambda_g=0.1,
                  model=ModelConfig(hidden=64, heads=4), checkpoint_dir=str(out / "ckpt"))
result = train(cfg, out / "data")["all"]
for row in result.log[::5] + result.log[-1:]:
    print(f"epoch {row['epoch']:3d}  L_mse {row['l_mse']:.3e}  L_G {row['l_graph']:.3e}  "
          f"test mse {row['select_mse']:.3e}")

report = evaluate(result.best_checkpoint, out / "data", "test")
for row in report.rows:
    print(f"{row['object']:>6}: mse {row['mse']:.3e}  baseline {row['baseline_mse']:.3e}  "
          f"mae {row['mae']:.3e}  consistency {row['consistency']:.3e}")

sample = out / "data" / "ball" / "0004"
pred = predict_files(sample / "rest.obj", sample / "rigid.obj", sample / "meta.json",
                     result.best_checkpoint, out / "ball_0004_pred.obj")
print(f"prediction written to {pred} ({load_mesh(pred).n_vertices} vertices)")
