"""Write seeded synthetic collision events and print the matching linear classifier.

The printed block can be pasted under ``params.classifier`` of an
``eventfilter.classifier`` group.
"""

import argparse

import yaml

from chanstream.apps.eventfilter import write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--events", type=int, default=10_000)
    ap.add_argument("--files", type=int, default=8)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--separation", type=float, default=2.0)
    args = ap.parse_args()
    gen = write_dataset(args.out_dir, args.events, args.files, args.seed, separation=args.separation)
    print(f"wrote {args.events} events in {args.files} files to {args.out_dir}")
    print(yaml.safe_dump({"classifier": gen.matching_classifier().to_config()}, default_flow_style=None), end="")


if __name__ == "__main__":
    main()
