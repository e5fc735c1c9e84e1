"""Standalone figure scripts: --csv ... --figure {1,2,3} --out file.svg"""

import argparse

from .render import LAYOUTS, render


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="gmixdyn-figures",
        description="Render result-CSV figures: (1) training-error grid "
                    "over (gamma, m); (2) momentum sweep; (3) normalized "
                    "variance, empirical vs prediction.")
    ap.add_argument("--csv", nargs="+", required=True,
                    help="result CSV file(s) in the harness schema")
    ap.add_argument("--figure", type=int, choices=(1, 2, 3), required=True)
    ap.add_argument("--out", required=True, help="output SVG path")
    ap.add_argument("--metric", default="loss", choices=("loss", "zero_one"))
    args = ap.parse_args(argv)
    spec = LAYOUTS[args.figure](args.csv, args.out, metric=args.metric)
    path = render(spec)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
