"""Write the procedural fixture corpus (train + held-out content/style PNGs)."""

import argparse

from stylerl.fixtures import write_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="fixtures")
    ap.add_argument("--content", type=int, default=8)
    ap.add_argument("--style", type=int, default=4)
    ap.add_argument("--held-out", type=int, default=2)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    dirs = write_corpus(args.out, args.content, args.style, args.size, args.seed, args.held_out)
    for name, path in dirs.items():
        print(f"{name:16s} {path}")


if __name__ == "__main__":
    main()
