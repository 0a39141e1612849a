"""Command-line experiment runner.

Subcommands: run <config>, gradcheck, sweep <config> --seeds a,b,c,
eval <checkpoint> <config>. METALIGN_OUTPUT_DIR overrides the output
directory. Exit codes: 0 ok, 2 config error, 3 runtime abort, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional

from . import analysis, nn, runner
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, load_config
from .data import CsvFormatError
from .gradcheck import format_report, run_gradcheck

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_CHECK = 4

OUTPUT_ENV = "METALIGN_OUTPUT_DIR"


def _fail(kind: str, detail: str, code: int) -> int:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)
    return code


def _out_dir(cfg_out: str, cli_out: Optional[str]) -> str:
    if cli_out:
        return cli_out
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return os.path.join(env, os.path.basename(cfg_out.rstrip("/")) or "run")
    return cfg_out


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        summary = runner.run_training(cfg, _out_dir(cfg.out_dir, args.out))
    except (ConfigError, CsvFormatError, ValueError) as e:
        return _fail("config", str(e), EXIT_CONFIG)
    print(json.dumps(summary))
    if summary["aborted"]:
        return _fail("non_finite", f"run aborted at step {summary['steps']}",
                     EXIT_ABORT)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = run_gradcheck(seed=args.seed)
    print(format_report(report))
    return EXIT_OK if report.ok else EXIT_CHECK


def cmd_sweep(args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        cfg = load_config(args.config)
        aggregate = runner.run_sweep(cfg, seeds, _out_dir(cfg.out_dir, args.out))
    except (ConfigError, CsvFormatError, ValueError) as e:
        return _fail("config", str(e), EXIT_CONFIG)
    print(json.dumps({k: aggregate[k] for k in
                      ("seeds", "final_target_acc", "mean_grad_cos",
                       "aborted_seeds")}))
    if aggregate["aborted_seeds"]:
        return _fail("non_finite",
                     f"aborted seeds: {aggregate['aborted_seeds']}", EXIT_ABORT)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config)
        params, meta = load_checkpoint(args.checkpoint)
        src, tgt = runner.build_datasets(cfg)
        bundle = rebuild_bundle(meta)
        for pid, arr in bundle.all_params().items():
            arr[...] = params[pid]
    except (ConfigError, CsvFormatError, CheckpointError, ValueError) as e:
        kind = "checkpoint" if isinstance(e, CheckpointError) else "config"
        return _fail(kind, str(e), EXIT_CONFIG)
    result = {
        "source_acc": analysis.evaluate(bundle.extractor, bundle.classifier, src),
        "target_acc": analysis.evaluate(bundle.extractor, bundle.classifier, tgt),
    }
    print(json.dumps(result))
    return EXIT_OK


def rebuild_bundle(meta: dict) -> nn.ModelBundle:
    """Reconstruct the model skeleton a checkpoint describes."""
    mc = meta["model"]
    vc = meta["variant"]
    extractor = nn.FeatureExtractor([meta["input_dim"], *mc["hidden"]],
                                    activation=mc["activation"])
    classifier = nn.ClassifierHead(extractor.out_dim, meta["num_classes"],
                                   hidden=mc["classifier_hidden"],
                                   activation=mc["activation"])
    discriminator = None
    if vc["name"] in ("dann", "dannpe"):
        in_dim = (meta["num_classes"] if vc["name"] == "dannpe"
                  else extractor.out_dim)
        discriminator = nn.DomainDiscriminator(in_dim, hidden=mc["disc_hidden"],
                                               dropout=mc["dropout"])
    groups = nn.group_params(extractor, mc["groups"])
    return nn.ModelBundle(
        extractor=extractor, classifier=classifier, discriminator=discriminator,
        group_weights=nn.GroupWeights.init(mc["groups"], meta["budget"]),
        groups=groups)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metalign",
                                     description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one training run")
    p_run.add_argument("config", help="path to a JSON config")
    p_run.add_argument("--out", help="output directory override")
    p_run.set_defaults(fn=cmd_run)

    p_gc = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.set_defaults(fn=cmd_gradcheck)

    p_sw = sub.add_parser("sweep", help="run one config over several seeds")
    p_sw.add_argument("config")
    p_sw.add_argument("--seeds", required=True, help="comma-separated seed list")
    p_sw.add_argument("--out", help="output directory override")
    p_sw.set_defaults(fn=cmd_sweep)

    p_ev = sub.add_parser("eval", help="evaluate a checkpoint on a config's data")
    p_ev.add_argument("checkpoint")
    p_ev.add_argument("config")
    p_ev.set_defaults(fn=cmd_eval)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
