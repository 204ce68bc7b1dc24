"""Ablation table over the first few bundled cases.

Same numbers the ``colorctrl bench`` command reports, printed per case so the
effect of each component is visible. Single cases can go either way; the
ordering holds for the means over the whole suite. Pass a count to run only
the first few cases (about 4 s each).

    python demos/ablation_table.py      # all 20
    python demos/ablation_table.py 5
"""

import sys

from colorctrl.bench import ALL_MODES, load_bundled_suite, run_suite


def main(n=None):
    cases = load_bundled_suite()[:n]
    report, timing = run_suite(cases)
    print(f"{'case':<8}" + "".join(f"{m.value:>18}" for m in ALL_MODES) + "   (bg_psnr / canny_ssim)")
    for row in report["per_case"]:
        cells = "".join(f"{row['metrics'][m.value]['bg_psnr']:>10.2f} / {row['metrics'][m.value]['canny_ssim']:.3f}"
                        for m in ALL_MODES)
        print(f"{row['id']:<8}{cells}")
    means = report["aggregate"]
    print(f"{'mean':<8}" + "".join(f"{means[m.value]['bg_psnr']:>10.2f} / {means[m.value]['canny_ssim']:.3f}"
                                   for m in ALL_MODES))
    for flag, ok in report["ordering_flags"].items():
        print(f"  {flag}: {ok}")
    print(f"{len(cases)} cases in {timing['total_seconds']:.1f} s")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else None)
