# app.py
# VERSION : 1.1.0
# DATE    : 2026-10-17
# DESCRIPTION : Command line entry point - generate / train / eval / verify / probe

import argparse
import os
import sys
from typing import List, Optional

from modules.config import DATA_DIR, logger
from modules.errors import ConfigError, PainetError

from commands.pipeline import cmd_eval, cmd_generate, cmd_probe, cmd_train
from commands.verify import SUITES, cmd_verify

APP_VERSION: str = "1.1.0"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        raise ConfigError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, out_default: str) -> None:
    p.add_argument("--config", help="flat key=value config file (e.g. a previous config.resolved)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
    p.add_argument("--seed", type=int, help="global seed (falls back to PAINET_SEED)")
    p.add_argument("--out", default=os.path.join(DATA_DIR, out_default), help="output directory")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int, help="EGNN decoder depth")
    p.add_argument("--horizon", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--tie-steps", action="store_true", help="share one attention set across all steps")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="painet", description="Energy-derived attention + equivariant decoder for particle dynamics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {APP_VERSION}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    gen = sub.add_parser("generate", help="simulate a spring + Coulomb dataset")
    _common(gen, "dataset")
    gen.add_argument("--n-particles", type=int)
    gen.add_argument("--frames", type=int)
    gen.add_argument("--spring-k", type=float)
    gen.add_argument("--coulomb-c", type=float)
    gen.add_argument("--dt", type=float, help="integrator step")
    gen.add_argument("--stride", type=int)
    gen.add_argument("--samples", type=int)

    tr = sub.add_parser("train", help="fit a model on a dataset file")
    _common(tr, "train")
    tr.add_argument("--data", help="dataset file (or data.path in the config)")
    _model_flags(tr)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)

    ev = sub.add_parser("eval", help="score a model against the linear baseline")
    _common(ev, "eval")
    ev.add_argument("--model", help="model file (or eval.model in the config)")
    ev.add_argument("--data", help="dataset file (or data.path in the config)")
    ev.add_argument("--task", choices=("s2s", "s2t"), help="default s2t")
    ev.add_argument("--split", choices=("train", "val", "test"), help="default test")
    ev.add_argument("--horizon", type=int)

    ve = sub.add_parser("verify", help="run a property suite")
    _common(ve, "verify")
    ve.add_argument("--suite", choices=SUITES + ("all",), help="default all")
    ve.add_argument("--trials", type=int)
    ve.add_argument("--tolerance", type=float)

    pr = sub.add_parser("probe", help="measure inference time and memory over N and T")
    _common(pr, "probe")
    pr.add_argument("--model")
    _model_flags(pr)
    pr.add_argument("--sizes", help="default 16,32,64")
    pr.add_argument("--horizons", help="default 5,10")
    pr.add_argument("--repeats", type=int, help="default 3")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logger.info(f"painet {APP_VERSION} - {args.command}")
        if args.command == "generate":
            cmd_generate(args)
        elif args.command == "train":
            cmd_train(args)
        elif args.command == "eval":
            cmd_eval(args)
        elif args.command == "verify":
            cmd_verify(args)
        elif args.command == "probe":
            cmd_probe(args)
        return 0
    except PainetError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(run())
