#!/usr/bin/env python3
"""
LSK-KF Experiment - Startup Script
Run the full observer comparison with environment-driven defaults.
"""

import argparse
import os
import sys
from pathlib import Path

from lskkf.cli import main as lskkf_main


def main() -> int:
    parser = argparse.ArgumentParser(description="LSK-KF experiment runner")
    parser.add_argument("--config", "-c", default=os.getenv("LSKKF_CONFIG", None), help="Experiment JSON config")
    parser.add_argument("--out", "-o", default=os.getenv("LSKKF_OUT", None), help="Output directory")
    parser.add_argument("--seed", type=int, default=os.getenv("LSKKF_SEED", None), help="RNG seed")
    parser.add_argument("--profile", default=os.getenv("LSKKF_PROFILE", None), help="default, small or large")
    parser.add_argument("--force", action="store_true", help="Overwrite an output directory of another config")
    args = parser.parse_args()

    project_root = Path(__file__).parent.absolute()
    config = args.config
    if config is None and (project_root / "experiment_default.json").exists():
        config = str(project_root / "experiment_default.json")

    print("🚀 Starting LSK-KF experiment...")
    print(f"📁 Project root: {project_root}")
    print(f"⚙️  Config: {config or '(built-in defaults)'}")
    print(f"🏷️  Profile: {args.profile or '(from config)'}")

    argv = ["run"]
    if args.profile:
        argv += ["--profile", args.profile]
    if config:
        argv += ["--config", config]
    if args.out:
        argv += ["--out", args.out]
    if args.seed is not None:
        argv += ["--seed", str(args.seed)]
    if args.force:
        argv.append("--force")
    return lskkf_main(argv)


if __name__ == "__main__":
    sys.exit(main())
