"""Paired spec/none smoke runs on the formant_noise set.

    python scripts/train_smoke.py --seeds 0 1 2 --steps 2000

Prints final/initial mel-L1 per seed and mode, and the T trajectory for
mode=spec every --log-every steps.
"""

import argparse
import time
from pathlib import Path

import numpy as np

from specdiff.data import SyntheticSpec, generate_dataset
from specdiff.trainer import TrainConfig, Trainer, TrainState

ROOT = Path(__file__).resolve().parents[1]


def run(cfg: TrainConfig, data, eval_batch, log_every: int):
    tr, st = Trainer(cfg), TrainState.initial(cfg)
    m0 = tr.eval_mel_l1(st, eval_batch)
    for i in range(cfg.steps):
        rep = tr.train_step(st, tr.sample_batch(st, data))
        if log_every and (i + 1) % log_every == 0:
            print(f"  [{cfg.mode} seed {cfg.seed}] step {i + 1}: mel-L1 ratio "
                  f"{tr.eval_mel_l1(st, eval_batch) / m0:.3f}  T={st.adaptive.t_current}  "
                  f"d={rep.d_loss:.3f} g_mel={rep.g_mel:.3f}", flush=True)
    return m0, tr.eval_mel_l1(st, eval_batch)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(ROOT / "configs" / "smoke.json"))
    p.add_argument("--data", default=str(ROOT / "configs" / "formant_noise.json"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--modes", nargs="+", default=["spec", "none"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log-every", type=int, default=500)
    args = p.parse_args()

    base = TrainConfig.from_json(args.config)
    if args.steps is not None:
        base = base.replace(steps=args.steps)
    data = [b.samples for b, _ in generate_dataset(SyntheticSpec.from_json(args.data))]
    eval_batch = np.stack(data)

    rows = []
    for seed in args.seeds:
        for mode in args.modes:
            t0 = time.time()
            m0, m1 = run(base.replace(seed=seed, mode=mode), data, eval_batch, args.log_every)
            rows.append((seed, mode, m0, m1, time.time() - t0))
    print(f"{'seed':>4} {'mode':>8} {'initial':>9} {'final':>9} {'ratio':>6} {'sec':>6}")
    for seed, mode, m0, m1, sec in rows:
        print(f"{seed:>4} {mode:>8} {m0:9.4f} {m1:9.4f} {m1 / m0:6.3f} {sec:6.0f}")


if __name__ == "__main__":
    main()
