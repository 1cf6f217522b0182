"""Generate a short dataset, train every model briefly and print the comparison table.

A few epochs on a few hundred hours only shows the workflow; the models are far from converged.

    python demos/small_benchmark.py [hours] [epochs]
"""
import sys

from gridcast.model import ModelConfig
from gridcast.pipeline import run_benchmark

hours = int(sys.argv[1]) if len(sys.argv) > 1 else 400
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 2


def progress(model, epoch, train_loss, val_loss):
    print(f"  {model} epoch {epoch}: train {train_loss:.4f}  val {val_loss:.4f}")


run = run_benchmark(seed=0, hours=hours, epochs=epochs, model_config=ModelConfig(seq_len=24), progress=progress)
print(run.report.aggregate().to_text())
for m, s in run.report.robustness().items():
    print(f"{m}: lag-1 autocorrelation of bus-mean error " + ", ".join(
        "NA" if r is None else f"{r:.2f}" for r in s.rho1))
print("timings (s): " + ", ".join(f"{k}={v:.1f}" for k, v in run.timings.items()))
