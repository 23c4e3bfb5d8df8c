"""``fedtune`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import socket
import sys
from pathlib import Path

from fedtune.errors import ConfigError, FedTuneError, UsageError

log = logging.getLogger("fedtune")


def _addr(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def cmd_gen_data(args) -> int:
    from fedtune.data import gen_corpus, write_corpus

    corpus = gen_corpus(args.seed, args.domains, args.per_domain, args.seq_len, args.vocab)
    write_corpus(corpus, args.out)
    print(f"wrote {len(corpus)} sequences ({args.domains} domains) to {args.out}")
    return 0


def cmd_split(args) -> int:
    from fedtune.data import read_corpus, split_dirichlet, split_meta, split_uniform, write_plan

    corpus = read_corpus(args.inp)
    if args.method == "meta":
        plan = split_meta(corpus, n_clients=args.clients)
    elif args.clients is None:
        raise ConfigError(f"--clients is required for the {args.method} splitter")
    elif args.method == "uniform":
        plan = split_uniform(corpus, args.clients, args.seed)
    else:
        plan = split_dirichlet(corpus, args.clients, args.alpha, args.seed)
    write_plan(plan, args.out)
    print(f"wrote {plan.n_clients}-client {plan.method} plan to {args.out}")
    return 0


def _write_history(hist, out: Path | None, report_dir: Path | None) -> None:
    from fedtune.report import emit_report

    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(hist.to_json(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if report_dir is not None:
        emit_report(hist, report_dir)
    print(json.dumps(hist.summary()["final"], sort_keys=True))


def cmd_run(args) -> int:
    from fedtune.config import load_config
    from fedtune.runtime import build_corpus, build_plan, build_test, prepare, run_simulated

    cfg = load_config(args.config)
    if args.mode == "simulated":
        _write_history(run_simulated(cfg), args.out, args.report_dir)
        return 0
    if args.addr is None:
        raise ConfigError(f"--addr is required in {args.mode} mode")
    host, port = _addr(args.addr)
    cfg = cfg.override(mode="distributed")
    if args.mode == "server":
        from fedtune.distributed import serve_distributed

        inputs = prepare(cfg)
        with socket.create_server((host, port)) as listener:
            log.info("serving %d clients on %s:%d", len(inputs.shards), host, port)
            hist = serve_distributed(cfg, inputs, listener)
        _write_history(hist, args.out, args.report_dir)
        return 0
    from fedtune.data import client_datasets
    from fedtune.distributed import client_connect

    if args.client_id is None:
        raise ConfigError("--client-id is required in client mode")
    corpus = build_corpus(cfg)
    shards = {s.client_id: s for s in client_datasets(corpus, build_plan(cfg, corpus), cfg.data.seed)}
    if args.client_id not in shards:
        raise ConfigError(f"client id {args.client_id} is not in the split plan (ids {min(shards)}..{max(shards)})")
    test = build_test(cfg) if cfg.algo == "pfedme" else None
    client_connect((host, port), args.client_id, shards[args.client_id], cfg, test)
    print(f"client {args.client_id} finished")
    return 0


HPO_KEYS = {"course", "space", "fidelity", "n", "seed", "n0", "r0", "eta", "max_fidelity", "out_dir"}


def cmd_hpo(args) -> int:
    from fedtune import hpo
    from fedtune.config import from_dict
    from fedtune.report import emit_report, trials_to_json

    try:
        spec = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    if not isinstance(spec, dict):
        raise ConfigError("hpo config must be a JSON object")
    unknown = sorted(set(spec) - HPO_KEYS)
    if unknown:
        raise ConfigError(f"unknown key(s) in hpo config: {', '.join(unknown)}")
    course = from_dict(spec.get("course", {}))
    space = hpo.SearchSpace.from_dict(spec.get("space") or {"lr": hpo.DEFAULT_SPACE["lr"]})
    runner = hpo.course_runner(course)
    fidelity = int(spec.get("fidelity", course.rounds))
    extra = {"method": args.method}
    if args.method == "grid":
        trials = hpo.grid_search(space, runner, fidelity)
    elif args.method == "random":
        trials = hpo.random_search(space, int(spec.get("n", 8)), int(spec.get("seed", 0)), runner, fidelity)
    else:
        res = hpo.successive_halving(space, int(spec.get("n0", min(8, space.size))), int(spec.get("r0", 1)),
                                     int(spec.get("eta", 2)), runner, seed=int(spec.get("seed", 0)),
                                     max_fidelity=spec.get("max_fidelity"))
        trials = res.trials
        extra.update(best_point=res.best.point, granted_rounds=res.granted, consumed_rounds=res.consumed)
    if args.method != "sha":
        try:
            land = hpo.rank_landscape(trials)
            extra.update(spearman=land.spearman, discrepancy=land.discrepancy)
        except FedTuneError as exc:
            extra.update(spearman=None, discrepancy=None, landscape_error=str(exc))
    out_dir = Path(args.out_dir or spec.get("out_dir") or "hpo_out")
    emit_report(trials, out_dir, extra)
    (out_dir / "trials.json").write_text(json.dumps(trials_to_json(trials), sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")
    print(f"{len(trials)} trials -> {out_dir}")
    return 0


def cmd_report(args) -> int:
    from fedtune.report import emit_report, trials_from_json
    from fedtune.runtime import history_from_json

    try:
        data = json.loads(Path(args.inp).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"{args.inp}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.inp}: invalid JSON ({exc})") from exc
    source = trials_from_json(data) if isinstance(data, list) else history_from_json(data)
    for p in emit_report(source, args.out_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedtune", description="Federated adapter fine-tuning on a micro LM.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-domain corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", type=int, default=9)
    g.add_argument("--per-domain", type=int, default=300)
    g.add_argument("--seq-len", type=int, default=32)
    g.add_argument("--vocab", type=int, default=32)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("split", help="partition a corpus across clients")
    s.add_argument("--method", choices=("uniform", "dirichlet", "meta"), required=True)
    s.add_argument("--alpha", type=float, default=0.5)
    s.add_argument("--clients", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--in", dest="inp", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_split)

    r = sub.add_parser("run", help="run one FL course")
    r.add_argument("--config", type=Path, required=True)
    r.add_argument("--mode", choices=("simulated", "server", "client"), default="simulated")
    r.add_argument("--addr")
    r.add_argument("--client-id", type=int)
    r.add_argument("--out", type=Path, help="write the course history JSON here")
    r.add_argument("--report-dir", type=Path, help="also emit CSV/JSON reports here")
    r.set_defaults(func=cmd_run)

    h = sub.add_parser("hpo", help="hyperparameter search over FL courses")
    h.add_argument("--config", type=Path, required=True)
    h.add_argument("--method", choices=("grid", "random", "sha"), required=True)
    h.add_argument("--out-dir", type=Path)
    h.set_defaults(func=cmd_hpo)

    rp = sub.add_parser("report", help="emit CSV/JSON reports from a saved history or trials file")
    rp.add_argument("--in", dest="inp", type=Path, required=True)
    rp.add_argument("--out-dir", type=Path, required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedTuneError as exc:
        print(f"fedtune: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"fedtune: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
