"""Write the easy and hard benchmark scenes as JSON for ``harvest simulate``."""

import argparse
from pathlib import Path

from harvest.sim import easy_scene, hard_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default=".", help="directory for easy_scene.json and hard_scene.json")
    ap.add_argument("-n", type=int, default=20, help="peppers per scene")
    ap.add_argument("--easy-seed", type=int, default=1)
    ap.add_argument("--hard-seed", type=int, default=3)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    easy_scene(args.n, args.easy_seed).save(out / "easy_scene.json")
    hard_scene(args.n, args.hard_seed).save(out / "hard_scene.json")
    print(f"wrote {out / 'easy_scene.json'} and {out / 'hard_scene.json'}")


if __name__ == "__main__":
    main()
