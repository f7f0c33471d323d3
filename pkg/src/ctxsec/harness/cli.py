"""Command line entry point.

Exit codes: 0 success, 1 domain failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..errors import ContextSecurityError, LintError
from ..policy import lint_file
from ..reasoning import load_training_file, train
from ..trust import load_jsonl, verify_blocks
from .runner import run
from .scenario import load_scenario
from .service import serve


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    result = run(scenario, seed=args.seed, trace_path=args.trace, ledger_path=args.ledger)
    if args.trace is None:
        sys.stdout.write(result.trace_jsonl())
    labels = " -> ".join(result.labels()) or "(none)"
    print(f"contexts: {labels}", file=sys.stderr)
    return 0


def _cmd_serve(args) -> int:
    config_path = Path(args.config)
    config = json.loads(config_path.read_text(encoding="utf-8"))
    server = serve(config, base_dir=config_path.parent)
    host, port = server.server_address[:2]
    print(f"listening on http://{host}:{port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _cmd_policy_lint(args) -> int:
    try:
        policies = lint_file(args.file)
    except LintError as exc:
        print(f"{args.file}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{args.file}: {exc.strerror}", file=sys.stderr)
        return 1
    print(f"{args.file}: {len(policies)} policies ok")
    return 0


def _cmd_verify_ledger(args) -> int:
    try:
        blocks = load_jsonl(args.file)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"{args.file}: unreadable ledger ({exc})", file=sys.stderr)
        return 1
    valid = verify_blocks(blocks)
    print(json.dumps({"valid": valid, "length": len(blocks)}))
    return 0 if valid else 1


def _cmd_train(args) -> int:
    classifier = train(load_training_file(args.data))
    classifier.save(args.out)
    print(f"wrote {len(classifier.rules)} rules to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxsec", description="Context-aware security and privacy service")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay a scenario and emit its trace")
    p.add_argument("--scenario", required=True, help="scenario file, or 'bob' for the built-in one")
    p.add_argument("--trace", help="write the JSON-lines trace here instead of stdout")
    p.add_argument("--ledger", help="write the ledger export here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_serve)

    p = sub.add_parser("policy", help="policy base maintenance")
    psub = p.add_subparsers(dest="policy_command", required=True)
    lint = psub.add_parser("lint", help="validate a policy file")
    lint.add_argument("file")
    lint.set_defaults(func=_cmd_policy_lint)

    p = sub.add_parser("verify-ledger", help="check a ledger export")
    p.add_argument("file")
    p.set_defaults(func=_cmd_verify_ledger)

    p = sub.add_parser("train", help="fit a rule classifier from labeled snapshots")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContextSecurityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
