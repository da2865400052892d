"""Generate a small dataset, train a narrow CVAE and evaluate it.

A few minutes on one core. Everything lands in ``demo_run/``.
"""
import logging
from pathlib import Path

import numpy as np

from tribogen.analysis import eval_report
from tribogen.dataset import GenerationConfig, ScalerParams, prepare_dataset
from tribogen.neural import NetworkSpec, TrainConfig, infer, save_checkpoint, train
from tribogen.neural.train import load_scaled

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path("demo_run")

cfg = GenerationConfig(recipe_count=500, shard_size=1000)  # 8000 samples
manifest, reused = prepare_dataset(cfg, out / "data")
print(f"{manifest.sample_count()} samples ({'reused' if reused else 'generated'})")
scaler = ScalerParams.load(out / "data" / manifest.scaler)

tr = load_scaled(manifest, "train", scaler)
va = load_scaled(manifest, "val", scaler)
te = load_scaled(manifest, "test", scaler)

spec = NetworkSpec.cvae(encoder_widths=(256, 256), encoder_dropout=(0.05, 0.05),
                        decoder_widths=(256, 256), decoder_dropout=(0.05, 0.05), latent_dim=16)
tcfg = TrainConfig(batch_size=256, max_lr=2e-3, warmup_steps=500, total_steps=3000, eval_every=500)
ck, _ = train(spec, tcfg, tr, va, scaler, trace_path=out / "trace.csv")
save_checkpoint(ck, out / "cvae.ckpt")

report, _ = eval_report(ck, te, scaler, functional=True, functional_samples=100)
print(f"median parameter sMAPE {report.smape_median:.2f}%, Wasserstein {report.wasserstein:.4f}")
print(f"functional sMAPE {report.functional_smape_mean:.2f}% (95% CI {report.functional_ci[0]:.2f}"
      f"-{report.functional_ci[1]:.2f})")

# amortised inference: many candidate surfaces for one law in one pass
thetas = infer(ck, te.cond[0], 1000, seed=0, scaler=scaler)
print("spread of inferred mu_h1 over 1000 draws:", np.round(np.percentile(thetas[:, 3], [5, 50, 95]), 1))
