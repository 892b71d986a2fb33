"""Run the easy and hard simulated benchmarks and print per-pepper records and rates.

Use ``--method MODEL`` to rank grasps from the fitted superellipsoid instead
of the surface-normal utility.
"""

import argparse
import json
import time

from harvest.config import config_from_dict
from harvest.sim import aggregate, easy_scene, hard_scene, run_trials, write_records


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("-n", type=int, default=20)
    ap.add_argument("--method", choices=("NORMALS", "MODEL"), default="NORMALS")
    ap.add_argument("--noise", type=float, default=0.0, help="sensor range noise sigma (m)")
    ap.add_argument("--jobs", type=int, default=2)
    ap.add_argument("--records", action="store_true", help="also print the records CSV")
    args = ap.parse_args()
    cfg = config_from_dict({"ranking": {"method": args.method}, "sensor": {"noise_sigma": args.noise}})
    t0 = time.perf_counter()
    scenes = {"easy": easy_scene(args.n, seed=1), "hard": hard_scene(args.n, seed=3)}
    results = run_trials(list(scenes.values()), cfg, jobs=args.jobs)
    for name, recs in zip(scenes, results):
        stats = aggregate(recs)
        print(f"== {name} ({args.method}) ==")
        if args.records:
            print(write_records(recs), end="")
        print(json.dumps(stats.to_json(), indent=1, sort_keys=True))
    print(f"elapsed {time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
