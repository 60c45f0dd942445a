"""Command-line wrapper: one invocation embeds one video's frames."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .export import BACKBONE_DIMS, ExportError, ExportJob, export


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nutrivid-export",
        description="Embed dish/frame images with a frozen backbone into a VNEM file.")
    parser.add_argument("--input", type=Path, required=True,
                        help="directory of frames, or a frame-list file "
                             "(ts_seconds<TAB>image_path per line)")
    parser.add_argument("--backbone", required=True,
                        help=f"one of {sorted(BACKBONE_DIMS)} or random-<D>")
    parser.add_argument("--checkpoint", type=Path, default=None)
    parser.add_argument("--output", type=Path, required=True)
    parser.add_argument("--video-id", default=None)
    parser.add_argument("--fps", type=float, default=1.0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(input_path=args.input, backbone_tag=args.backbone,
                    output_path=args.output, video_id=args.video_id,
                    checkpoint=args.checkpoint, fps=args.fps)
    try:
        path = export(job)
    except (ExportError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
