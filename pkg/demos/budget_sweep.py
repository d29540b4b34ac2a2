"""A small accuracy-versus-labelled-budget grid, printed as a table.

This is a scaled-down version of the acceptance protocol (which uses 2000
training patches and 20 epochs). Expect a few minutes per cell on one core.

    python demos/budget_sweep.py [workdir] [epochs]
"""
import sys
import tempfile
import time
from pathlib import Path

from hydramix import data, training
from hydramix.model import ModelConfig

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="hydramix_sweep_"))
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 5

ds = data.load(data.generate(data.DatasetSpec(n_train=600, n_test=300, seed=0), root / "data"))
start = time.perf_counter()
result = training.sweep(
    ds,
    budgets=[50, 100],
    modes=["partial", "hydramix"],
    seeds=[0],
    hp=training.Hyperparams(epochs=epochs),
    model_config=ModelConfig(),
    run_dir=root / "sweep",
)
print(training.render_table(result.summary))
print(f"{len(result.rows)} cells in {time.perf_counter() - start:.0f}s; per-run metrics under {root / 'sweep'}")
