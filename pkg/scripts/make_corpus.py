"""Write a seeded synthetic text corpus for the word-count application."""

import argparse

from chanstream.apps.wordcount import write_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--files", type=int, default=120)
    ap.add_argument("--tokens", type=int, default=1000, help="tokens per file")
    ap.add_argument("--vocabulary", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    write_corpus(args.out_dir, args.files, args.tokens, seed=args.seed, vocabulary=args.vocabulary)
    print(f"wrote {args.files} files x {args.tokens} tokens to {args.out_dir}")


if __name__ == "__main__":
    main()
