"""Thin-client CLI: every subcommand builds a service request and sends it,
either to a running server (--server URL) or to the in-process app.

Subcommands: generate, bench, oracle, dump-mask, serve.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _client(server: str | None):
    if server:
        import httpx
        return httpx.Client(base_url=server, timeout=600.0)
    from fastapi.testclient import TestClient
    from .service.app import app
    return TestClient(app)


def _post(args, path: str, payload: dict) -> dict:
    with _client(args.server) as client:
        resp = client.post(path, json=payload)
        if resp.status_code != 200:
            sys.stderr.write(f"error {resp.status_code}: {resp.text}\n")
            raise SystemExit(2)
        return resp.json()


def _write_or_print(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, "utf-8")
    else:
        print(text)


def _cmd_generate(args) -> int:
    payload = {"suite": args.suite, "seed": args.seed, "mode": args.mode,
               "engine": args.engine}
    if args.n is not None:
        payload["n"] = args.n
    if args.model_config:
        cfg = json.loads(Path(args.model_config).read_text("utf-8"))
        payload["engine_config"] = cfg
        payload["engine"] = "transformer"
    data = _post(args, "/v1/generate", payload)
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2), "utf-8")
    print(f"# task: {data['task']}  mode: {data['mode']}")
    totals = data["trace"]["totals"]
    print(f"# tokens/pass: {totals['tokens_per_pass']:.3f}  "
          f"decode passes: {totals['decode_passes']}  "
          f"blocks: {data['trace']['block_count']}")
    if data.get("correct") is not None:
        print(f"# expected: {data['expected_answer']}  correct: {data['correct']}")
    print(data["final_text"])
    return 0


def _cmd_bench(args) -> int:
    payload = {"suites": args.suite}
    if args.count is not None:
        payload["count"] = args.count
    if args.seed is not None:
        payload["base_seed"] = args.seed
    data = _post(args, "/v1/bench", payload)
    report = data["report"]
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True), "utf-8")
    if args.csv:
        from .bench import render_csv
        Path(args.csv).write_text(render_csv(report), "utf-8")
    agg = report["aggregates"]
    for suite, entry in sorted(agg["by_suite"].items()):
        line = f"{suite}:"
        for mode, stats in sorted(entry["modes"].items()):
            acc = "" if stats["accuracy"] is None else f" acc={stats['accuracy']:.2f}"
            line += f"  {mode} tpp={stats['mean_tokens_per_pass']:.2f}{acc}"
        if "mean_speedup" in entry:
            line += f"  speedup={entry['mean_speedup']:.2f}"
        print(line)
    print(f"position-law violations: {agg['position_law_violations']}  "
          f"errors: {agg['errors']}")
    return 0


def _cmd_oracle(args) -> int:
    trials = {}
    if args.trials is not None:
        for name in ("mask", "equivalence", "kv-reuse", "grammar"):
            trials[name] = args.trials
    data = _post(args, "/v1/oracle",
                 {"checks": args.check, "seed": args.seed, "trials": trials})
    for res in data["results"]:
        flag = "PASS" if res["passed"] else "FAIL"
        print(f"[{flag}] {res['name']}: {res['details']} "
              f"({res['trials']} trials, {res['elapsed_s']:.2f}s)")
        for failure in res["failures"]:
            print(f"       {failure}")
    if not data["passed"]:
        return 1
    return 0


def _cmd_dump_mask(args) -> int:
    payload = {"prefix_len": args.prefix_len,
               "title_lens": [int(x) for x in args.titles.split(",") if x]}
    if args.bodies:
        payload["body_lens"] = [int(x) for x in args.bodies.split(",") if x]
    data = _post(args, "/v1/dump-mask", payload)
    _write_or_print(data["grid"], args.out)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn
    from .service.app import app
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fanout",
        description="Branch-parallel decoding in one sequence: generation, "
                    "benchmarks, oracles, mask dumps.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--server", default=None,
                       help="base URL of a running service; default runs in-process")

    p = sub.add_parser("generate", help="run one task and print the final text")
    common(p)
    p.add_argument("--suite", choices=["retrieval", "multidoc", "planning"],
                   default="retrieval")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=None, help="branch count")
    p.add_argument("--mode", choices=["normal", "parallel"], default="parallel")
    p.add_argument("--engine", choices=["scripted", "transformer"], default="scripted")
    p.add_argument("--model-config", default=None,
                   help="JSON model config file; implies --engine transformer")
    p.add_argument("--out", default=None, help="write the full response JSON here")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("bench", help="run suites in both modes and report")
    common(p)
    p.add_argument("--suite", action="append",
                   choices=["retrieval", "multidoc", "planning"], default=None,
                   help="repeatable; default: all three")
    p.add_argument("--count", type=int, default=None, help="tasks per suite")
    p.add_argument("--seed", type=int, default=None, help="suite base seed")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--csv", default=None, help="aggregate CSV path")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("oracle", help="run verification oracles; nonzero exit on failure")
    common(p)
    p.add_argument("--check", action="append",
                   choices=["all", "mask", "equivalence", "kv-reuse", "grammar"],
                   default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=None,
                   help="override trial/run count for every selected check")
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("dump-mask", help="print a layout's mask as a text grid")
    common(p)
    p.add_argument("--prefix-len", type=int, required=True)
    p.add_argument("--titles", required=True, help="comma-separated title lengths")
    p.add_argument("--bodies", default=None, help="comma-separated body lengths")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_dump_mask)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.set_defaults(func=_cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "suite", None) is None and args.command == "bench":
        args.suite = ["retrieval", "multidoc", "planning"]
    if getattr(args, "check", None) is None and args.command == "oracle":
        args.check = ["all"]
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
