"""Toy training run on the fixture corpus, followed by held-out evaluation.

Reports the three trend checks: late vs. early episode reward, style loss at
sequence step 5 vs. 1, and SSIM(content, output) at step 1 vs. 10.

    python scripts/run_toy_training.py --out runs/toy --steps 2000
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from stylerl.fixtures import heldout_pairs, write_corpus
from stylerl.imageio import load_dir
from stylerl.metrics import evaluate_pairs
from stylerl.trainer import TrainConfig, backbone_from_spec, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--window", type=int, default=100, help="episodes compared at each end")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    dirs = write_corpus(out / "data", seed=args.seed)
    cfg = TrainConfig(total_env_steps=args.steps, seed=args.seed,
                      content_dir=str(dirs["content"]), style_dir=str(dirs["style"]))
    _, contents = load_dir(cfg.content_dir, cfg.image_size)
    _, styles = load_dir(cfg.style_dir, cfg.image_size)
    backbone = backbone_from_spec(cfg.backbone)

    t0 = time.perf_counter()
    agent, log = train(cfg, contents, styles, backbone, out_dir=out)
    print(f"trained {args.steps} env steps in {time.perf_counter() - t0:.1f} s, {len(log)} updates")

    rewards = np.asarray(log.episode_rewards)
    w = min(args.window, len(rewards) // 2)
    if w:
        first, last = rewards[:w].mean(), rewards[-w:].mean()
        print(f"episode reward: first {w} = {first:.4f}, last {w} = {last:.4f}  -> {'up' if last > first else 'NOT up'}")

    report = evaluate_pairs(agent, backbone, heldout_pairs(dirs), steps=10)
    report.write(out / "heldout_report.csv")
    print(report.summary())
    a1, a5, a10 = (report.aggregate(i) for i in (1, 5, 10))
    print(f"style loss step5 <= step1: {a5['style_loss'] <= a1['style_loss']}")
    print(f"ssim step1 >= step10:      {a1['ssim'] >= a10['ssim']}")


if __name__ == "__main__":
    main()
