"""``vpnc`` command line.

Exit codes: 0 ok, 2 input error, 3 config/checkpoint mismatch, 4 corrupt stream.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_MISMATCH = 3
EXIT_CORRUPT = 4


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:g}"


def _dims(text: str) -> tuple[int, int]:
    try:
        w, _, h = text.lower().partition("x")
        dims = (int(w), int(h or w))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be positive, got {text!r}")
    return dims


def _seed(default: int, flag: int | None) -> int:
    env = os.environ.get("VPNC_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(EXIT_INPUT, f"VPNC_SEED must be an integer, got {env!r}") from None
    return default if flag is None else flag


def _fov(args):
    from .geometry import FieldOfView

    try:
        return FieldOfView(args.fov, args.fov_v if args.fov_v is not None else args.fov)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, str(exc)) from None


def _load(checkpoint: str, model_config: str | None = None):
    from .backbone import CodecConfig
    from .model import load_model
    from .tensor import CheckpointError

    if not Path(checkpoint).is_file():
        raise CliError(EXIT_INPUT, f"no such checkpoint: {checkpoint}")
    try:
        model, meta = load_model(checkpoint)
    except (CheckpointError, KeyError, ValueError, RuntimeError) as exc:
        raise CliError(EXIT_MISMATCH, f"cannot load checkpoint {checkpoint}: {exc}") from None
    if meta.get("model_hash") and meta["model_hash"] != model.model_hash().hex():
        raise CliError(EXIT_MISMATCH, f"checkpoint {checkpoint} does not match its recorded model hash")
    if model_config:
        try:
            cfg = CodecConfig.load(model_config)
        except FileNotFoundError:
            raise CliError(EXIT_INPUT, f"no such model config: {model_config}") from None
        except (ValueError, TypeError) as exc:
            raise CliError(EXIT_INPUT, f"bad model config {model_config}: {exc}") from None
        if cfg.architecture() != model.config.architecture():
            raise CliError(EXIT_MISMATCH, f"checkpoint {checkpoint} was not trained with model config {model_config}")
    return model, meta


# -- subcommands ---------------------------------------------------------------------


def cmd_extract(args) -> int:
    from .data import read_erp, write_png
    from .geometry import extract_all, plan_coverage

    fov = _fov(args)
    erp = read_erp(args.erp)
    dims = args.dims or (erp.shape[0] // 2, erp.shape[0] // 2)
    plan = plan_coverage(fov, dims)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    # render into a scratch directory first so a failure leaves nothing behind
    with tempfile.TemporaryDirectory(dir=out) as tmp:
        names = []
        for i, vp in enumerate(extract_all(erp, plan)):
            name = f"vp_{i}_{_num(vp.center.lon)}_{_num(vp.center.lat)}.png"
            write_png(Path(tmp) / name, vp.pixels)
            names.append(name)
        manifest = plan.to_dict()
        manifest["files"] = names
        with open(Path(tmp) / "plan.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
        for name in names + ["plan.json"]:
            os.replace(Path(tmp) / name, out / name)
    print(f"{len(names)} viewports of {dims[0]}x{dims[1]} written to {out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    from .codec import ModelMismatchError
    from .data import read_erp
    from .geometry import plan_coverage
    from .harness import code_image, per_viewport_bits
    from .codec import coding_model
    from .tensor import atomic_write

    model, _ = _load(args.checkpoint, args.model)
    erp = read_erp(args.erp)
    plan = plan_coverage(_fov(args), model.config.viewport)
    try:
        res = code_image(coding_model(model), erp, plan, model.config.lam, model.model_hash())
    except ModelMismatchError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    atomic_write(args.out, res.stream)
    acct = per_viewport_bits(res.stream)
    print(f"BPI {acct['total_bits']}  (header {acct['header_bits']} bits, {len(plan)} viewports)")
    for row in acct["viewports"]:
        c = plan.centers[row["viewport"]]
        print(f"  viewport {row['viewport']} ({_num(c.lon)}, {_num(c.lat)}): "
              f"{row['record_bits']} bits (z {row['z_bits']}, y {row['y_bits']})")
    print(f"V-PSNR {res.v_psnr:.3f} dB  V-SSIM {res.v_ssim:.4f}")
    return EXIT_OK


def cmd_decompress(args) -> int:
    from .bitstream import Bitstream, VersionError
    from .codec import ModelMismatchError, check_header, coding_model, decompress_erp
    from .coding import StreamError
    from .data import write_png

    try:
        with open(args.stream, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise CliError(EXIT_INPUT, f"no such stream: {args.stream}") from None
    model, _ = _load(args.checkpoint)
    mhash = model.model_hash()
    try:
        stream = Bitstream.from_bytes(data)
        check_header(model, stream.header, mhash)
        erp, _ = decompress_erp(coding_model(model), data, mhash)
    except VersionError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except ModelMismatchError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except StreamError as exc:
        raise CliError(EXIT_CORRUPT, f"corrupt stream: {exc}") from None
    write_png(args.out, erp)
    print(f"decoded {erp.shape[1]}x{erp.shape[0]} ERP to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import TrainConfig, train

    cfg_dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg_dict = json.load(fh)
        except FileNotFoundError:
            raise CliError(EXIT_INPUT, f"no such train config: {args.config}") from None
    for key in ("lam", "kind", "batch_size", "epochs", "max_steps", "lr", "dataset"):
        val = getattr(args, key)
        if val is not None:
            cfg_dict[key] = val
    if args.vpct:
        cfg_dict["vpct"] = True
    if args.viewport:
        cfg_dict["viewport"] = list(args.viewport)
    cfg_dict["seed"] = _seed(cfg_dict.get("seed", 0), args.seed)
    cfg_dict["threads"] = args.threads
    try:
        cfg = TrainConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"bad training config: {exc}") from None
    res = train(cfg, checkpoint=args.out, log_path=args.log)
    last = [r for r in res.log if "step" in r][-1]
    print(f"trained {cfg.kind}{' + VPCT' if cfg.vpct else ''} lambda={cfg.lam} to step {last['step']}: "
          f"loss {last['loss']:.4f}, {last['bpp']:.4f} bpp, mse {last['mse']:.6f}")
    if res.validation is not None:
        print(f"validation: BPI {res.validation.bpi:.0f}, V-PSNR {res.validation.v_psnr:.3f} dB")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def _images(args):
    from .data import load_dataset, read_erp

    if args.dataset:
        return load_dataset(args.dataset)
    return [read_erp(p) for p in args.images]


def cmd_eval(args) -> int:
    from .harness import evaluate
    from .tensor import atomic_write

    model, _ = _load(args.checkpoint)
    point = evaluate(model, _images(args))
    text = json.dumps(point.to_dict(), indent=2)
    if args.out:
        atomic_write(args.out, text.encode())
    print(text)
    return EXIT_OK


def cmd_rd_sweep(args) -> int:
    from .harness import rd_sweep, rows_to_csv

    rows, _ = rd_sweep(args.checkpoints, _images(args), args.csv, args.svg)
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


def cmd_mask_dump(args) -> int:
    from .vpct import build_cross_mask, build_intra_mask, format_mask

    if args.n < 1:
        raise CliError(EXIT_INPUT, f"--n must be >= 1, got {args.n}")
    if args.viewport_index is None:
        mask = build_intra_mask(args.n)
    elif args.viewport_index < 0:
        raise CliError(EXIT_INPUT, f"--viewport-index must be >= 0, got {args.viewport_index}")
    else:
        mask = build_cross_mask(args.n, args.viewport_index)
    print(format_mask(mask))
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vpnc", description="Viewport-based 360-degree image codec.")
    p.add_argument("--threads", type=int, default=1, help="torch worker threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def plan_flags(sp):
        sp.add_argument("--fov", type=float, default=90.0, help="horizontal field of view in degrees")
        sp.add_argument("--fov-v", type=float, default=None, help="vertical field of view (default: --fov)")

    sp = sub.add_parser("extract", help="cut an ERP into planned viewports")
    sp.add_argument("erp")
    plan_flags(sp)
    sp.add_argument("--dims", type=_dims, default=None, help="viewport WxH (default: H/2 x H/2)")
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("compress", help="encode an ERP to a .vpnc stream")
    sp.add_argument("erp")
    sp.add_argument("--model", default=None, help="model config JSON to check the checkpoint against")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    plan_flags(sp)
    sp.set_defaults(func=cmd_compress)

    sp = sub.add_parser("decompress", help="decode a .vpnc stream to an ERP PNG")
    sp.add_argument("stream")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_decompress)

    sp = sub.add_parser("train", help="train one codec")
    sp.add_argument("--config", default=None, help="training config JSON")
    sp.add_argument("--lam", type=float, default=None)
    sp.add_argument("--kind", default=None, choices=("factorized", "hyperprior", "joint", "reference"))
    sp.add_argument("--vpct", action="store_true")
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--max-steps", type=int, default=None)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--dataset", default=None, help="directory of PNG ERPs (default: synthetic)")
    sp.add_argument("--viewport", type=_dims, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--log", default=None, help="line-delimited JSON training log")
    sp.set_defaults(func=cmd_train)

    def image_flags(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--dataset", default=None)
        g.add_argument("--images", nargs="+", default=None)

    sp = sub.add_parser("eval", help="RD point of one checkpoint")
    sp.add_argument("--checkpoint", required=True)
    image_flags(sp)
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("rd-sweep", help="RD table over several checkpoints")
    sp.add_argument("--checkpoints", nargs="+", required=True)
    image_flags(sp)
    sp.add_argument("--csv", default=None)
    sp.add_argument("--svg", default=None)
    sp.set_defaults(func=cmd_rd_sweep)

    sp = sub.add_parser("mask-dump", help="print a VPCT attention mask")
    sp.add_argument("--n", type=int, required=True, help="tokens per viewport")
    sp.add_argument("--viewport-index", type=int, default=None, help="omit for the intra-view mask")
    sp.set_defaults(func=cmd_mask_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    from .data import InputError
    from .tensor import set_deterministic

    set_deterministic(args.threads)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
