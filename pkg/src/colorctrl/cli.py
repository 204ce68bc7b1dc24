"""Command-line interface: ``colorctrl {generate,edit,metrics,bench}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Outputs go to
``--out``/``--out-dir`` when given, else to ``$COLORCTRL_OUT_DIR``, else to
the working directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from . import bench, cachefile
from .errors import ColorCtrlError, ConfigError, InputError, LoadError
from .imageio import read_image, read_mask, write_image, write_mask
from .metrics import DEFAULT_DILATE, SCORERS, evaluate
from .model import ModelConfig, ToyMMDiT, find_word, tokenize
from .sampler import EditSpec, SampleParams, Sampler

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
OUT_ENV = "COLORCTRL_OUT_DIR"


class UsageError(Exception):
    pass


def _out_dir(arg: str | None) -> str:
    path = arg or os.environ.get(OUT_ENV) or "."
    os.makedirs(path, exist_ok=True)
    return path


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model overrides")
    g.add_argument("--image-size", type=int, help="image side in pixels (default 32)")
    g.add_argument("--layers", type=int, help="transformer blocks (default 6)")
    g.add_argument("--heads", type=int, help="attention heads (default 4)")
    g.add_argument("--d-model", type=int, help="model width (default 64)")
    g.add_argument("--init-seed", type=int, help="weight seed (default 0)")


def _sample_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("sampling")
    g.add_argument("--seed", type=int, default=42, help="noise seed (default 42)")
    g.add_argument("--steps", type=int, default=28, help="Euler steps (default 28)")
    g.add_argument("--cfg", type=float, default=7.5, help="guidance scale (default 7.5)")


def _config(args) -> ModelConfig:
    overrides = {"image_size": args.image_size, "n_layers": args.layers, "n_heads": args.heads,
                 "d_model": args.d_model, "init_seed": args.init_seed}
    try:
        return replace(ModelConfig(), **{k: v for k, v in overrides.items() if v is not None})
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _params(args) -> SampleParams:
    try:
        return SampleParams(steps=args.steps, cfg_scale=args.cfg, seed=args.seed)
    except InputError as exc:
        raise UsageError(str(exc)) from exc


def _image_ext(fmt: str, gray: bool = False) -> str:
    return {"png": ".png", "ppm": ".pgm" if gray else ".ppm"}[fmt]


def cmd_generate(args) -> int:
    config, params = _config(args), _params(args)
    sampler = Sampler(ToyMMDiT(config))
    image, cache = sampler.run_source(args.prompt, replace(params, record=bool(args.cache_out)))
    out = args.out or os.path.join(_out_dir(None), "generated.png")
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_image(out, image)
    print(out)
    if args.cache_out:
        n = cachefile.save(cache, args.cache_out)
        print(f"{args.cache_out} ({n} bytes)")
    return EXIT_OK


def _parse_reweight(items) -> dict[str, float]:
    out = {}
    for item in items or []:
        word, sep, scale = item.partition("=")
        try:
            value = float(scale)
        except ValueError:
            value = -1.0
        if not sep or not word or value < 0:
            raise UsageError(f"--reweight expects word=scale with scale >= 0, got {item!r}")
        out[word] = value
    return out


def _word_indices(tokens, words, indices) -> list[int]:
    out = list(indices or [])
    for w in words or []:
        try:
            out.append(find_word(tokens, w))
        except InputError as exc:
            raise UsageError(str(exc)) from exc
    for i in out:
        if i not in tokens.word_spans:
            raise UsageError(f"word index {i} is not in the prompt (words: {tokens.words})")
    return sorted(set(out))


def cmd_edit(args) -> int:
    if args.cache_in:
        cache = cachefile.load(args.cache_in)
        config, params = cache.config, cache.params
        source_prompt = args.source_prompt or cache.prompt
        if source_prompt != cache.prompt:
            raise UsageError(f"--source-prompt {source_prompt!r} differs from the cached prompt {cache.prompt!r}")
        sampler = Sampler(ToyMMDiT(config))
    else:
        if not args.source_prompt:
            raise UsageError("--source-prompt is required without --cache-in")
        config, params = _config(args), _params(args)
        source_prompt = args.source_prompt
        sampler = Sampler(ToyMMDiT(config))
    target_prompt = args.target_prompt
    try:
        src_tokens = tokenize(source_prompt, config)
        rw_tokens = tokenize(source_prompt if args.reweight_on == "source" else target_prompt, config)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    edit_words = _word_indices(src_tokens, args.word, args.word_index)
    if not args.no_color and not edit_words:
        raise UsageError("color preservation needs --word or --word-index (or pass --no-color)")
    reweight = {}
    for word, scale in _parse_reweight(args.reweight).items():
        reweight[_word_indices(rw_tokens, [word], None)[0]] = scale
    try:
        spec = EditSpec(source_prompt, target_prompt, edit_words=edit_words, reweight=reweight,
                        reweight_on=args.reweight_on, epsilon=args.epsilon,
                        enable_structure=not args.no_structure, enable_color=not args.no_color,
                        control_uncond=not args.no_uncond_control, mask_dilate=args.mask_dilate)
    except InputError as exc:
        raise UsageError(str(exc)) from exc
    if not args.cache_in:
        _, cache = sampler.run_source(source_prompt, params)
    result = sampler.run_edit(spec, params, cache)
    out = _out_dir(args.out_dir)
    paths = {"source": os.path.join(out, "source" + _image_ext(args.format)),
             "edited": os.path.join(out, "edited" + _image_ext(args.format)),
             "mask": os.path.join(out, "mask" + _image_ext(args.format, gray=True))}
    write_image(paths["source"], result.source)
    write_image(paths["edited"], result.edited)
    mask = result.mask
    if mask is not None:
        write_mask(paths["mask"], mask.pixel_mask)
    else:
        write_mask(paths["mask"], [[False] * config.image_size] * config.image_size)
    control_log = {
        "source_prompt": source_prompt, "target_prompt": target_prompt,
        "edit_words": [src_tokens.words[i] for i in edit_words], "edit_word_indices": edit_words,
        "epsilon": spec.epsilon, "structure": spec.enable_structure, "color": spec.enable_color,
        "control_uncond": spec.control_uncond, "reweight_on": spec.reweight_on,
        "reweight": {rw_tokens.words[i]: s for i, s in sorted(reweight.items())},
        "mask_fraction": float(mask.token_mask.mean()) if mask is not None else None,
        "mask_degenerate": bool(mask.degenerate) if mask is not None else None,
        "steps": result.log,
    }
    paths["log"] = os.path.join(out, "control_log.json")
    with open(paths["log"], "w", encoding="utf-8") as f:
        json.dump(control_log, f, indent=2, sort_keys=True)
        f.write("\n")
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref = read_image(args.ref)
    edited = read_image(args.edited)
    mask = read_mask(args.mask) if args.mask else None
    report = evaluate(ref, edited, mask, args.dilate, args.scorer, args.text)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    cases = bench.load_suite(args.suite) if args.suite else bench.load_bundled_suite()
    try:
        modes = [bench.AblationMode(m.strip()) for m in args.modes.split(",") if m.strip()]
    except ValueError as exc:
        raise UsageError(f"unknown mode in --modes {args.modes!r}; choose from "
                         f"{[m.value for m in bench.ALL_MODES]}") from exc
    if not modes:
        raise UsageError("--modes is empty")
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    params = bench.BenchParams(sample=_params(args), config=_config(args), epsilon=args.epsilon,
                               dilate_radius=args.dilate, scorer=args.scorer)
    report, timing = bench.run_suite(cases, modes, params, jobs=args.jobs)
    out = args.out or os.path.join(_out_dir(None), "bench_report.json")
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    bench.write_report(report, out, timing)
    for name, ok in sorted(report["ordering_flags"].items()):
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"{out}  ({timing['total_seconds']:.1f} s)")
    if args.strict and not bench.ordering_ok(report):
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colorctrl", description="Training-free color editing on a toy MM-DiT.",
                                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("generate", help="sample one image", formatter_class=fmt)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", help=f"image path (.png/.ppm/.pgm); default ${OUT_ENV}/generated.png")
    p.add_argument("--cache-out", help="also save the source attention cache to this file")
    _sample_args(p)
    _model_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("edit", help="edit a source prompt into a target prompt", formatter_class=fmt)
    p.add_argument("--source-prompt", help="required unless --cache-in is given")
    p.add_argument("--target-prompt", required=True)
    p.add_argument("--word", action="append", help="edit word in the source prompt (repeatable)")
    p.add_argument("--word-index", type=int, action="append", help="edit word by index (repeatable)")
    p.add_argument("--epsilon", type=float, default=0.1, help="mask threshold")
    p.add_argument("--reweight", nargs="+", metavar="WORD=SCALE", help="attribute re-weighting")
    p.add_argument("--reweight-on", choices=("target", "source"), default="target",
                   help="which branch's scores are re-weighted")
    p.add_argument("--no-structure", action="store_true", help="disable structure preservation")
    p.add_argument("--no-color", action="store_true", help="disable color preservation")
    p.add_argument("--no-uncond-control", action="store_true", help="leave the unconditional pass uncontrolled")
    p.add_argument("--mask-dilate", type=int, default=0, help="dilate the edit mask by this many tokens")
    p.add_argument("--cache-in", help="reuse a source cache written by generate --cache-out")
    p.add_argument("--out-dir", help=f"output directory; default ${OUT_ENV} or .")
    p.add_argument("--format", choices=("png", "ppm"), default="png", help="image format (ppm writes .ppm/.pgm)")
    _sample_args(p)
    _model_args(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("metrics", help="compare two images", formatter_class=fmt)
    p.add_argument("--ref", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--mask", help="edit-region mask image; background is its dilated complement")
    p.add_argument("--dilate", type=int, default=DEFAULT_DILATE, help="mask dilation radius in pixels")
    p.add_argument("--scorer", choices=sorted(SCORERS), default="placeholder")
    p.add_argument("--text", default="", help="text for the semantic scorer")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bench", help="run an ablation suite", formatter_class=fmt)
    p.add_argument("--suite", help="suite JSON (default: the bundled 20-case toy suite)")
    p.add_argument("--modes", default=",".join(m.value for m in bench.ALL_MODES))
    p.add_argument("--out", help=f"report path; default ${OUT_ENV}/bench_report.json")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--strict", action="store_true", help="exit 1 if any ordering flag fails")
    p.add_argument("--epsilon", type=float, default=0.1, help="mask threshold")
    p.add_argument("--dilate", type=int, default=DEFAULT_DILATE, help="evaluation mask dilation radius")
    p.add_argument("--scorer", choices=sorted(SCORERS), default="placeholder")
    _sample_args(p)
    _model_args(p)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"colorctrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"colorctrl {args.command}: error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ColorCtrlError, OSError, ValueError) as exc:
        print(f"colorctrl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
