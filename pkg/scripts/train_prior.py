"""Train a score network on a prior family and write a checkpoint."""
import argparse
import time

from mpsmra.priors import PriorSpec
from mpsmra.score_model import TrainConfig, save_checkpoint, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kind", default="step", choices=["step", "bell"])
    p.add_argument("--L", type=int, default=41)
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    a = p.parse_args()
    cfg = TrainConfig(steps=a.steps, channels=a.channels, seed=a.seed)
    t0 = time.time()
    ckpt = train(PriorSpec(a.kind, a.L), cfg, log_path=a.out + ".csv")
    save_checkpoint(ckpt, a.out)
    print(f"steps={a.steps} final_loss={ckpt.final_loss:.4f} wall={time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
