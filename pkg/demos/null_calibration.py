"""Small power study under no shift: both aggregate tests should rarely reject.

Run with ``python3 demos/null_calibration.py [reps]``; ten replicates take
about a minute.
"""

import sys

from shiftdiag.simlab import run_power_study, setup_spec


def main(reps: int = 10) -> None:
    spec = setup_spec("null")
    study = run_power_study(spec, reps, spec.run_config(bootstrap_reps=300), seed=1,
                            progress=lambda r, rec: print(f"rep {r + 1}: {rec['p']}"))
    for key in study.keys:
        rate, lo, hi = study.rejection_rate(key)
        print(f"{key}: {study.rejections(key)}/{reps} rejected, rate {rate:.2f} "
              f"[{lo:.2f}, {hi:.2f}]")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
