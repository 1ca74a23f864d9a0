"""Desk-scale MNIST ablation (four rows, several seeds) with a win count for the latent ensemble.

Needs the MNIST IDX files under $LCNN_DATA_ROOT/mnist. Takes about a minute per seed.
"""
import argparse
from pathlib import Path

from latentcnn.config import load_config
from latentcnn.experiments import ablation_table, run_ablation
from latentcnn.metrics import MetricsWriter

p = argparse.ArgumentParser()
p.add_argument("--config", default=str(Path(__file__).parent / "presets" / "mnist_desk.cfg"))
p.add_argument("--out", default="runs/mnist_ablation")
args = p.parse_args()

cfg = load_config(args.config)
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
log = MetricsWriter(out / "metrics.jsonl")
results = []
for seed in cfg.run.seeds:
    r = run_ablation(cfg, seed, log_fn=lambda rec, s=seed: log(dict(rec, seed=s)))
    results.append(r)
    print(f"seed {seed}: " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in r["errors"].items()), flush=True)

text, csv_text = ablation_table(results, cfg.data.source)
(out / "ablation.csv").write_text(csv_text)
(out / "ablation.txt").write_text(text)
print(text, end="")
wins = sum(r["errors"]["2CNN-latent"] <= r["errors"]["2CNN-average"] for r in results)
print(f"2CNN-latent <= 2CNN-average in {wins}/{len(results)} seeds")
