"""Write a procedural clip corpus and a split manifest.

    python scripts/make_corpus.py --out data/synthetic --clips 50 --frames 17
"""

import argparse

from videojscc.synthetic import make_corpus
from videojscc.video import split_dataset, write_manifest


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="data/synthetic")
    p.add_argument("--clips", type=int, default=50)
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    m = make_corpus(args.out, args.clips, args.frames, (args.size, args.size), args.seed)
    m = split_dataset(m, args.seed)
    write_manifest(m, f"{args.out}/manifest.txt")
    print(f"{args.out}/manifest.txt", m.counts())


if __name__ == "__main__":
    main()
