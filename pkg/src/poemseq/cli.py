"""Command line client for the poemseq service.

Every subcommand is a request to the HTTP API. By default the app runs
in-process; ``--server URL`` sends the same requests to a running
``poemseq serve``. File inputs are read locally and sent inline where the
API allows it; ``run`` and ``evaluate`` pass paths, so a remote server
must share the filesystem.

Exit codes: 0 success, 1 partial failure, 2 configuration or input error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import httpx

from poemseq.config import read_config_file
from poemseq.errors import ConfigurationError

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


class ApiError(Exception):
    def __init__(self, status: int, detail: str):
        super().__init__(detail)
        self.status = status
        self.detail = detail

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.status >= 500 else EXIT_CONFIG


class Api:
    """Synchronous JSON client; in-process when no server URL is given."""

    def __init__(self, server: str | None = None):
        if server:
            self._client = httpx.Client(base_url=server.rstrip("/"), timeout=600.0)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                from fastapi.testclient import TestClient

            from poemseq.service.app import app

            self._client = TestClient(app, raise_server_exceptions=True)

    def post(self, path: str, payload: dict) -> dict:
        try:
            resp = self._client.post(path, json=payload)
        except httpx.TransportError as exc:
            raise ApiError(503, f"cannot reach server: {exc}") from exc
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail")
            except ValueError:
                detail = resp.text
            raise ApiError(resp.status_code, detail if isinstance(detail, str) else json.dumps(detail))
        return resp.json()


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text("utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def _corpus_payload(path: str | None) -> dict:
    return {} if path is None else {"corpus_text": _read_text(path)}


def _read_mapping(path: str | None) -> dict:
    if path is None:
        return {}
    data = read_config_file(path)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must contain an object")
    return data


def _emit(obj, out_path: str | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False)
    if out_path:
        Path(out_path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _print_parse_errors(errors) -> None:
    for e in errors:
        print(f"line {e['line']}: {e['message']}", file=sys.stderr)


def cmd_stats(api: Api, args) -> int:
    result = api.post("/corpus/stats", _corpus_payload(args.corpus))
    _print_parse_errors(result["parse_errors"])
    doc = result["document"]
    if args.compare:
        doc = {**doc, "reference_differences": result["reference_differences"]}
    _emit(doc, args.output)
    return EXIT_PARTIAL if result["parse_errors"] else EXIT_OK


def cmd_validate(api: Api, args) -> int:
    result = api.post("/corpus/validate", _corpus_payload(args.corpus))
    _print_parse_errors(result["parse_errors"])
    _emit(result["document"], args.output)
    return EXIT_OK if result["passed"] else EXIT_PARTIAL


def cmd_segment(api: Api, args) -> int:
    policy = _read_mapping(args.policy)
    providers = policy.pop("providers", {})
    payload = {**_corpus_payload(args.corpus), "poem_id": args.poem, "policy": policy, "providers": providers}
    _emit(api.post("/segment", payload), args.output)
    return EXIT_OK


def cmd_refine(api: Api, args) -> int:
    config = _read_mapping(args.config)
    if config.get("cache_dir") and args.config:
        cache = Path(config["cache_dir"])
        config["cache_dir"] = str(cache if cache.is_absolute() else Path(args.config).resolve().parent / cache)
    payload = {**_corpus_payload(args.corpus), "poem_id": args.poem, "segment": args.segment, "config": config}
    result = api.post("/refine", payload)
    _emit(result, args.output)
    return EXIT_PARTIAL if any(t.get("error") for t in result["traces"]) else EXIT_OK


def _load_prompts(args) -> list[dict]:
    prompts = []
    if args.prompts:
        data = json.loads(_read_text(args.prompts))
        if not isinstance(data, list):
            raise ConfigurationError("prompts file must hold a JSON list")
        for k, item in enumerate(data):
            if isinstance(item, str):
                prompts.append({"segment_id": f"{args.poem_id}#{k}", "text": item})
            else:
                prompts.append({"segment_id": item["segment_id"], "text": item["text"]})
    for text in args.prompt or ():
        prompts.append({"segment_id": f"{args.poem_id}#{len(prompts)}", "text": text})
    if not prompts:
        raise ConfigurationError("give --prompts FILE or at least one --prompt")
    return prompts


def cmd_generate(api: Api, args) -> int:
    width, height = args.size
    payload = {
        "poem_id": args.poem_id,
        "prompts": _load_prompts(args),
        "consistency": not args.no_consistency,
        "seed": args.seed,
        "width": width,
        "height": height,
        "backend": _read_mapping(args.backend) or {"kind": "toy"},
        "output_dir": str(Path(args.out).resolve()) if args.out else None,
    }
    result = api.post("/generate", payload)
    for art in result["artifacts"]:
        art.pop("image_b64", None)
    _emit(result)
    return EXIT_PARTIAL if any(a["error"] for a in result["artifacts"]) else EXIT_OK


def cmd_evaluate(api: Api, args) -> int:
    payload = {
        **_corpus_payload(args.corpus),
        "poem_id": args.poem,
        "sequence_dir": str(Path(args.sequence).resolve()),
        "approach": args.approach,
        "model": args.model,
        "providers": _read_mapping(args.providers).get("providers", {}),
    }
    _emit(api.post("/evaluate", payload), args.output)
    return EXIT_OK


def cmd_report(api: Api, args) -> int:
    if args.reference:
        payload = {"reference": True}
    elif args.runs:
        runs = []
        for path in args.runs:
            data = json.loads(_read_text(path))
            runs.extend(data if isinstance(data, list) else [data])
        payload = {"runs": runs}
    else:
        raise ConfigurationError("give metric files or --reference")
    result = api.post("/report", payload)
    if args.json:
        _emit(result["document"])
    else:
        print(result["text"], end="")
    return EXIT_OK


def cmd_run(api: Api, args) -> int:
    config = _read_mapping(args.config)
    payload = {
        "config": config,
        "base_dir": str(Path(args.config).resolve().parent),
        "approach": args.approach,
        "seed": args.seed,
        "output_dir": str(Path(args.output).resolve()) if args.output else None,
    }
    result = api.post("/run", payload)
    manifest = result["manifest"]
    failed = [p for p in manifest["poems"] if p["status"] != "ok"]
    print(f"{len(manifest['poems']) - len(failed)}/{len(manifest['poems'])} poems ok; output in {result['output_dir']}")
    for p in failed:
        print(f"  {p['poem_id']}: {p['status']}: {p.get('error')}", file=sys.stderr)
    return result["exit_code"]


def cmd_serve(args) -> int:
    import uvicorn

    uvicorn.run("poemseq.service.app:app", host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError("size must look like 64x64") from exc
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poemseq", description="Poem to illustrated image sequence.")
    parser.add_argument("--server", help="URL of a running poemseq service (default: in-process)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="corpus statistics as JSON")
    p.add_argument("corpus")
    p.add_argument("--compare", action="store_true", help="include differences from the reference corpus")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("validate", help="check every poem record")
    p.add_argument("corpus")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("segment", help="entity and emotion segmentation of one poem")
    p.add_argument("--poem", required=True)
    p.add_argument("--policy", help="TOML or JSON boundary policy")
    p.add_argument("--corpus", help="corpus file (default: bundled sample)")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("refine", help="multi-stage description refinement")
    p.add_argument("--poem", required=True)
    p.add_argument("--segment", type=int)
    p.add_argument("--config", help="TOML or JSON with mspr/providers/segmentation tables")
    p.add_argument("--corpus")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("generate", help="render an image sequence from prompts")
    p.add_argument("--prompts", help="JSON list of strings or {segment_id, text}")
    p.add_argument("--prompt", action="append")
    p.add_argument("--poem-id", default="poem")
    p.add_argument("--out", help="directory for PNGs and sequence.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-consistency", action="store_true")
    p.add_argument("--backend", help="TOML or JSON backend descriptor (default: toy)")
    p.add_argument("--size", type=_size, default=(64, 64))
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score a generated sequence")
    p.add_argument("--sequence", required=True, help="directory holding sequence.json")
    p.add_argument("--poem", required=True)
    p.add_argument("--corpus")
    p.add_argument("--approach", default="poemtale")
    p.add_argument("--model")
    p.add_argument("--providers", help="TOML or JSON file with a providers table")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate metric files into the comparison table")
    p.add_argument("runs", nargs="*")
    p.add_argument("--reference", action="store_true", help="render the published reference table")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline over a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--approach")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "serve":
        return cmd_serve(args)
    try:
        return args.func(Api(args.server), args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ApiError as exc:
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
