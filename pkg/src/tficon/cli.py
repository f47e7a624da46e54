"""``tficon`` command line.

Exit codes: 0 ok, 1 input or configuration error, 2 numerical failure,
3 contract violation. Every run prints its resolved settings first, in a
form that can be pasted back as flags or (for ``compose``) as a config file.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import io as tio
from .errors import InputError, TficonError
from .metrics import (external_score, mae, plot_alignment, round_trip, sa_visualize, ssim,
                      token_sweep, trajectory_alignment)
from .pipeline import (CompositionConfig, CompositionJob, build_config, compose,
                       config_to_text, parse_config_text)
from .prompts import DEFAULT_TOKEN, build_exceptional
from .solver import LatentState, SolverConfig, integrate
from .toy import ToyDims, init_toy, load_weights, save_weights, toy_image

log = logging.getLogger("tficon")

EXPERIMENTS = ("trajectory", "token-sweep", "inversion")


class Parser(argparse.ArgumentParser):
    """Usage errors exit with 1 (input error) rather than argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo(pairs):
    print("# resolved settings")
    for k, v in pairs:
        print(f"{k} = {v}")


def _backbone(args):
    path = args.weights or os.environ.get("TFICON_WEIGHTS")
    if path:
        return load_weights(path), path
    return init_toy(0), "builtin:seed=0"


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _box(text):
    vals = _int_list(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("box is TOP,LEFT,HEIGHT,WIDTH")
    return tuple(vals)


def cmd_toy_init(args):
    dims = ToyDims.parse(args.dims) if args.dims else ToyDims()
    _echo([("seed", args.seed), ("dims", args.dims or ""), ("out", args.out)])
    backbone = init_toy(args.seed, dims)
    checksum = save_weights(args.out, backbone)
    print(f"checksum = {checksum}")
    print(f"bytes = {Path(args.out).stat().st_size}")
    return 0


def cmd_invert(args):
    backbone, wpath = _backbone(args)
    _echo([("weights", wpath), ("image", args.image), ("token", args.token), ("steps", args.steps),
           ("order", args.order), ("out", args.out or ""), ("dump_traj", args.dump_traj or ""),
           ("dump_attn", args.dump_attn or ""), ("check", args.check)])
    image = tio.load_image(args.image)
    den, schedule = backbone.denoiser, backbone.schedule
    W = build_exceptional(backbone.text_encoder, args.token)
    x0 = backbone.autoencoder.encode(image)
    fwd = SolverConfig(order=args.order, num_steps=args.steps, direction="forward")
    x_T, traj = integrate(LatentState(x0, 0), den, W, fwd, schedule=schedule)
    if args.out:
        try:
            np.save(args.out, x_T.data)
        except OSError as exc:
            raise InputError(f"cannot write latent {args.out}: {exc}") from exc
    if args.dump_traj:
        tio.write_trajectory(args.dump_traj, [s.data for s in traj.states],
                             {"direction": "forward", "grid": [int(g) for g in traj.grid],
                              "token": args.token, "order": args.order})
        print(f"trajectory_frames = {len(traj.states)}")
    if args.check or args.dump_attn:
        blocks = []

        def grab(event):
            blocks.extend((tap.layer, event.t, tap.self_attn) for tap in event.taps)

        bwd = SolverConfig(order=args.order, num_steps=args.steps, direction="backward")
        x_0, _ = integrate(x_T, den, W, bwd, schedule=schedule,
                           hooks=[grab] if args.dump_attn else ())
        if args.dump_attn:
            print(f"attention_blocks = {tio.write_attention(args.dump_attn, blocks)}")
        if args.check:
            rec = backbone.autoencoder.decode(x_0.data)
            print(f"round_trip_mae = {mae(image, rec)!r}")
            print(f"round_trip_ssim = {ssim(image * 255.0, rec * 255.0)!r}")
            print(f"latent_mae = {mae(x0, x_0.data)!r}")
    return 0


def _compose_config(args) -> CompositionConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
    flags = {"steps": args.steps, "order": args.order, "tau_a": args.tau_a, "tau_b": args.tau_b,
             "cfg_scale": args.cfg_scale, "token_value": args.token, "seed": args.seed,
             "start_mode": args.start_mode, "composition_prompt": args.composition_prompt,
             "prompt_text": args.prompt, "max_length": args.max_length}
    for name in ("inject_values", "renormalize", "reverse_cross"):
        if getattr(args, name):
            flags[name] = True
    values.update({k: v for k, v in flags.items() if v is not None})
    return build_config(CompositionConfig(), values)


def cmd_compose(args):
    backbone, wpath = _backbone(args)
    cfg = _compose_config(args)
    if args.user_mask is None and args.box is None:
        raise InputError("compose needs --user-mask or --box")
    _echo([("weights", wpath), ("main", args.main), ("ref", args.ref), ("seg_mask", args.seg_mask),
           ("user_mask", args.user_mask or ""), ("box", ",".join(map(str, args.box)) if args.box else ""),
           ("out", args.out), ("report", args.report or "")])
    sys.stdout.write(config_to_text(cfg))
    job = CompositionJob(main_image=args.main, reference_image=args.ref, seg_mask=args.seg_mask,
                         user_mask=args.user_mask, user_box=args.box, config=cfg,
                         output=args.out, report=args.report)
    start = time.perf_counter()
    result = compose(job, backbone)
    if args.dump_attn:
        blocks = [(layer, t, A) for t, ov in sorted(result.overrides.items())
                  for layer, A in sorted(ov.maps.items())]
        print(f"attention_blocks = {tio.write_attention(args.dump_attn, blocks)}")
    if args.save_config:
        Path(args.save_config).write_text(config_to_text(cfg))
    rep = result.report
    print(f"background_max_abs_diff = {rep.get('result.background_max_abs_diff')!r}")
    print(f"equals_main_reconstruction = {str(rep.get('result.equals_main_reconstruction')).lower()}")
    print(f"injected_steps = {len(result.overrides)}")
    log.info("compose finished in %.2f s", time.perf_counter() - start)
    return 0


def _eval_images(args, size):
    if args.images:
        return [tio.load_image(p) for p in args.images]
    return [toy_image(args.image_seed + i, size) for i in range(args.num_images)]


def _write_outputs(out_dir, name, text, csv_text, extra=None):
    print(text, end="")
    if not out_dir:
        return
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.txt").write_text(text)
        (out / f"{name}.csv").write_text(csv_text)
        for fname, content in (extra or {}).items():
            (out / fname).write_text(content)
    except OSError as exc:
        raise InputError(f"cannot write reports to {out_dir}: {exc}") from exc


def cmd_eval(args):
    backbone, wpath = _backbone(args)
    vocab = backbone.text_encoder.vocab_size
    tokens = args.tokens or [int(v) for v in np.linspace(1, vocab - 3, args.num_tokens).round()]
    _echo([("weights", wpath), ("experiment", args.experiment), ("steps", args.steps),
           ("orders", ",".join(map(str, args.orders))), ("order", args.order),
           ("images", ",".join(args.images) if args.images else ""), ("num_images", args.num_images),
           ("image_seed", args.image_seed), ("tokens", ",".join(map(str, tokens))),
           ("token", args.token), ("out_dir", args.out_dir or "")])
    images = _eval_images(args, backbone.dims.image_size)
    if args.experiment == "trajectory":
        rep = trajectory_alignment(images, backbone, args.orders, args.steps, args.token)
        _write_outputs(args.out_dir, "trajectory", rep.to_text(), rep.to_csv())
        if args.plot and args.out_dir:
            plot_alignment(rep, Path(args.out_dir) / "trajectory.png")
    elif args.experiment == "token-sweep":
        rep = token_sweep(images, backbone, tokens, args.steps, args.order)
        _write_outputs(args.out_dir, "token_sweep", rep.to_text(), rep.to_csv(),
                       {"token_sweep_summary.csv": rep.summary_csv()})
    else:
        rep = token_sweep(images, backbone, [args.token], args.steps, args.order)
        extra = {}
        if args.scorer:
            scores = _external_scores(args, images, backbone)
            extra["inversion_external.csv"] = "image,score\n" + "".join(f"{i},{s!r}\n" for i, s in scores)
        _write_outputs(args.out_dir, "inversion", rep.to_text(), rep.to_csv(), extra)
    return 0


def _external_scores(args, images, backbone):
    import tempfile
    scores = []
    with tempfile.TemporaryDirectory() as tmp:
        for i, img in enumerate(images):
            rec = round_trip(img, backbone, args.token, args.steps, args.order)[0]
            a, b = Path(tmp) / f"{i}_in.png", Path(tmp) / f"{i}_rec.png"
            tio.save_image(a, img)
            tio.save_image(b, rec)
            scores.append((i, external_score(args.scorer, a, b)))
    return scores


def _to_gray(img, scale):
    img = np.asarray(img, dtype=np.float64)
    span = img.max() - img.min()
    norm = (img - img.min()) / span if span > 0 else np.full_like(img, 0.5)
    return np.kron(norm, np.ones((scale, scale)))


def cmd_viz_attn(args):
    _echo([("dump", args.dump), ("layer", args.layer), ("t", args.t), ("out", args.out),
           ("scale", args.scale)])
    maps = tio.read_attention(args.dump)
    key = (args.layer, args.t)
    if key not in maps:
        raise InputError(f"no map for layer {args.layer}, step {args.t} in {args.dump}; "
                         f"available: {sorted(maps)}")
    vis = sa_visualize(maps[key])
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc
    images = {"row_mean": vis["row_mean"], "col_mean": vis["col_mean"]}
    images.update({f"pca{i + 1}": pc for i, pc in enumerate(vis["pca"])})
    for name, img in images.items():
        tio.save_gray(out / f"{name}.png", _to_gray(img, args.scale))
    print("explained_variance = " + ",".join(f"{v:.6g}" for v in vis["explained"]))
    print(f"files = {len(images)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="tficon", description="Training-free image composition on a toy diffusion backbone.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--weights", help="toy weight file (default: $TFICON_WEIGHTS, else seed-0 toy)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("toy-init", help="write a toy backbone weight file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dims", default="", help="overrides like latent_size=8,model_dim=16")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_toy_init)

    s = sub.add_parser("invert", help="invert an image under the exceptional prompt")
    s.add_argument("--image", required=True)
    s.add_argument("--token", type=int, default=DEFAULT_TOKEN)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--order", type=int, default=2, choices=(1, 2, 3))
    s.add_argument("--out", help="write the inverted latent as .npy")
    s.add_argument("--dump-traj", help="write the forward trajectory dump")
    s.add_argument("--dump-attn", help="write self-attention maps of the reconstruction")
    s.add_argument("--check", action="store_true", help="reconstruct and print the round-trip error")
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("compose", help="compose a reference object into a main image")
    s.add_argument("--main", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--seg-mask", required=True)
    s.add_argument("--user-mask")
    s.add_argument("--box", type=_box, help="user region TOP,LEFT,HEIGHT,WIDTH (replaces --user-mask)")
    s.add_argument("--prompt")
    s.add_argument("--config", help="flat key = value config file; flags override it")
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--save-config", help="write the resolved config file")
    s.add_argument("--dump-attn", help="write the injected composite maps")
    s.add_argument("--steps", type=int)
    s.add_argument("--order", type=int, choices=(1, 2, 3))
    s.add_argument("--tau-a", type=float)
    s.add_argument("--tau-b", type=float)
    s.add_argument("--cfg-scale", type=float)
    s.add_argument("--token", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--max-length", type=int)
    s.add_argument("--start-mode", choices=("noise_space", "latent_paste"))
    s.add_argument("--composition-prompt", choices=("normal", "exceptional"))
    s.add_argument("--inject-values", action="store_true")
    s.add_argument("--renormalize", action="store_true")
    s.add_argument("--reverse-cross", action="store_true")
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("eval", help="evaluation experiments")
    s.add_argument("--experiment", required=True, choices=EXPERIMENTS)
    s.add_argument("--images", nargs="*", help="PNG inputs (default: seeded toy images)")
    s.add_argument("--num-images", type=int, default=16)
    s.add_argument("--image-seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=20)
    s.add_argument("--orders", type=_int_list, default=[1, 2, 3])
    s.add_argument("--order", type=int, default=2, choices=(1, 2, 3))
    s.add_argument("--token", type=int, default=DEFAULT_TOKEN)
    s.add_argument("--tokens", type=_int_list, help="token values for the sweep")
    s.add_argument("--num-tokens", type=int, default=10)
    s.add_argument("--scorer", help="external scorer command taking two image paths")
    s.add_argument("--out-dir")
    s.add_argument("--plot", action="store_true", help="also write PNG charts (needs matplotlib)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("viz-attn", help="render a self-attention map from a dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--layer", type=int, required=True)
    s.add_argument("--t", type=int, required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--scale", type=int, default=8)
    s.set_defaults(func=cmd_viz_attn)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TficonError as exc:
        stage = getattr(exc, "stage", None)
        print(f"error{f' in {stage}' if stage else ''}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
