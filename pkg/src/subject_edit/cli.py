"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .assets import moving_square, reference_images
from .config import load_config
from .pipeline import (Layout, build_components, run_edit, run_evaluate, run_invert, run_mask,
                       run_register_identity, run_train_motion, run_visualize)
from .storage import save_frames, save_mask_frames

log = logging.getLogger("subject_edit")


def _parse_lambdas(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad lambda list {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty lambda list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="subject-edit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def staged(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--out", type=Path, default=None, help="override paths.outputs")
        return p

    staged("mask", "semantic features and foreground masks for the video and references")
    staged("train-motion", "fit the motion-guidance adapters")
    staged("register-identity", "fit identity LoRA deltas and identity adapters")
    staged("invert", "store the DDIM inversion trajectory of the source video")
    edit = staged("edit", "edit the source video")
    edit.add_argument("--no-lora", action="store_true", help="text-guided edit, ignore identity deltas")
    ev = staged("evaluate", "score edited frames")
    ev.add_argument("--frames", type=Path, default=None, help="frame directory to score")
    ab = staged("ablate", "run an ablation variant")
    ab.add_argument("--variant", required=True,
                    choices=("lambda_sweep", "learnable_motion_no_guidance", "identity_with",
                             "identity_without", "all"))
    ab.add_argument("--lambdas", type=_parse_lambdas, default=(0.0, 0.3, 1.0),
                    help="comma-separated guidance weights for lambda_sweep")
    staged("visualize-features", "per-frame RGB images of the top three feature components")

    mk = sub.add_parser("make-assets", help="write the synthetic toy video and references")
    mk.add_argument("--out", required=True, type=Path)
    mk.add_argument("--seed", type=int, default=0)
    return parser


def _make_assets(out: Path, seed: int) -> None:
    video, mask = moving_square(seed=seed)
    refs, ref_masks = reference_images(seed=seed + 1)
    save_frames(video, out / "video")
    save_mask_frames(mask, out / "video_mask")
    save_frames(refs, out / "refs")
    save_mask_frames(ref_masks, out / "refs_mask")
    print(f"wrote toy assets to {out}")


def _ablate(args, cfg, layout, comps) -> None:
    from .ablation import VARIANTS, AblationSpec, load_ablation_assets, run_ablation, \
        write_ablation_report

    assets = load_ablation_assets(cfg, layout, comps)
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    rows = []
    for variant in variants:
        rows += run_ablation(AblationSpec(variant, args.lambdas, cfg), assets).rows
    csv_path, txt_path = write_ablation_report(rows, layout.outputs / "ablation")
    print(txt_path.read_text(), end="")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "make-assets":
            _make_assets(args.out, args.seed)
            return 0
        cfg = load_config(args.config)
        layout = Layout.from_config(cfg, args.out)
        comps = build_components(cfg)
        if args.command == "mask":
            for which, path in run_mask(cfg, layout, comps).items():
                print(f"{which}: {path}")
        elif args.command == "train-motion":
            r = run_train_motion(cfg, layout, comps)
            print(f"probe loss {r.probe_initial:.6f} -> {r.probe_final:.6f}")
        elif args.command == "register-identity":
            r = run_register_identity(cfg, layout, comps)
            print(f"probe loss {r.probe_initial:.6f} -> {r.probe_final:.6f}")
        elif args.command == "invert":
            run_invert(cfg, layout, comps)
            print(f"trajectory: {layout.trajectory}")
        elif args.command == "edit":
            r = run_edit(cfg, layout, comps, use_lora=not args.no_lora)
            print(f"edited with prompt {r.prompt!r}; frames in {layout.edit_dir / 'frames'}")
        elif args.command == "evaluate":
            row = run_evaluate(cfg, layout, comps, args.frames)
            print(f"text {row.text_alignment:.2f} image "
                  f"{'-' if row.image_alignment is None else f'{row.image_alignment:.2f}'} "
                  f"temporal {row.temporal_consistency:.2f}")
        elif args.command == "ablate":
            _ablate(args, cfg, layout, comps)
        elif args.command == "visualize-features":
            paths = run_visualize(cfg, layout, comps)
            print(f"wrote {len(paths)} images to {paths[0].parent}")
    except (ValueError, FileNotFoundError, OSError) as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
