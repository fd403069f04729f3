"""Command-line driver: ``dap gen-data | train | eval | ablate | visualize | flops``.

Every command takes ``--config run.json`` (a flat JSON object with dotted keys
such as ``"model.d": 32`` or ``"train.rho": 0.5``) plus ``--set key=value``
overrides; explicit flags win over both. Run directories always receive the
resolved ``config.json``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import evalkit
from .corpus import LanguageSpec, ParallelPair, generate_corpus, read_corpus, split_heldout, write_corpus
from .model import EncoderConfig, init_params, load_checkpoint, save_checkpoint
from .numcore import ShapeError
from .objectives import DIRECTIONS, TrainConfig
from .pipeline import embed_pairs, evaluate, train, write_jsonl

log = logging.getLogger("dap")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_SWEEP = 0, 2, 3, 4

SWEEPS: dict[str, tuple[str, list]] = {
    "direction": ("train.direction", list(DIRECTIONS)),
    "rho": ("train.rho", [0.0, 0.25, 0.5, 0.75, 1.0]),
    "klayers": ("model.K", [1, 2, 3, 4]),
}


class UsageError(ValueError):
    pass


@dataclass
class EvalSettings:
    k: int = 4
    mining_mode: str = "exact"
    m: int = 8
    log_interval: int = 100
    checkpoint_interval: int = 0
    heldout_frac: float = 0.1
    visualize_pairs: int = 100


@dataclass
class RunConfig:
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: LanguageSpec = field(default_factory=LanguageSpec)
    eval: EvalSettings = field(default_factory=EvalSettings)
    n_pairs: int = 5000
    out: str = "runs"
    name: str = "run"

    _SECTIONS = ("model", "train", "data", "eval")

    def resolved(self) -> "RunConfig":
        """Tie the model's vocabulary and language table to the corpus spec."""
        model = replace(self.model, V=self.data.vocab_size, n_langs=self.data.n_langs)
        return replace(self, model=model)

    def validate(self) -> None:
        self.data.validate()
        self.model.validate()
        self.train.validate()
        if self.n_pairs < 1:
            raise UsageError(f"n_pairs must be >= 1, got {self.n_pairs}")
        if self.data.max_len + 1 > self.model.S_max:
            raise UsageError(f"data.max_len={self.data.max_len} needs model.S_max >= {self.data.max_len + 1}")

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for sec in self._SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                flat[f"{sec}.{k}"] = v
        flat.update(n_pairs=self.n_pairs, out=self.out, name=self.name)
        return flat

    def set(self, key: str, value: Any) -> None:
        if "." in key:
            sec, attr = key.split(".", 1)
            if sec not in self._SECTIONS:
                raise UsageError(f"unknown config section in {key!r}")
            target = getattr(self, sec)
        else:
            target, attr = self, key
        names = {f.name: f for f in fields(target)}
        if attr not in names or attr.startswith("_"):
            raise UsageError(f"unknown config key {key!r}")
        setattr(target, attr, _coerce(getattr(target, attr), value, key))

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        rc = cls()
        for k, v in _flatten(flat).items():
            rc.set(k, v)
        return rc

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(current: Any, value: Any, key: str) -> Any:
    if not isinstance(value, str):
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            return float(value)
        return value
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {value!r}")
    try:
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {value!r}") from None
    if current is None:
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    return value


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with dotted keys (model.d, train.rho, ...)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for data, init and batching")
    common.add_argument("--out", help="output directory (gen-data: output file)")
    common.add_argument("--name", help="run name; the run directory is OUT/NAME")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="dap", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic parallel corpus")
    g.add_argument("--n-pairs", type=int)

    t = sub.add_parser("train", parents=[common], help="train one model")
    t.add_argument("--corpus", type=Path, required=True)
    t.add_argument("--objective", choices=["tr", "tr+tlm", "dap"])
    t.add_argument("--steps", type=int)
    t.add_argument("--rho", type=float)
    t.add_argument("--direction", choices=list(DIRECTIONS))
    t.add_argument("--log-interval", type=int)
    t.add_argument("--checkpoint-interval", type=int)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out pairs")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--corpus", type=Path, required=True)
    e.add_argument("--task", choices=["retrieval", "mining", "token-align"], required=True)
    e.add_argument("--report", type=Path, help="JSON output path (default: alongside the checkpoint)")

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate one model per sweep value")
    a.add_argument("--corpus", type=Path, required=True)
    a.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    a.add_argument("--steps", type=int)

    v = sub.add_parser("visualize", parents=[common], help="PCA scatter of token representations")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--corpus", type=Path, required=True)
    v.add_argument("--n-pairs", type=int)

    f = sub.add_parser("flops", parents=[common], help="analytic forward FLOPs per sample")
    f.add_argument("--paper-scale", action="store_true", help="12-layer, d=768, 119547-token vocabulary")
    f.add_argument("--seq-len", type=int)
    f.add_argument("--json", action="store_true", help="print JSON instead of a table")
    return ap


def load_run_config(args: argparse.Namespace) -> RunConfig:
    if args.config:
        try:
            rc = RunConfig.from_flat(json.loads(args.config.read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    else:
        rc = RunConfig()
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        rc.set(k.strip(), v.strip())
    if args.seed is not None:
        for key in ("model.seed", "train.seed", "data.seed"):
            rc.set(key, args.seed)
    if args.out is not None:
        rc.out = args.out
    if args.name is not None:
        rc.name = args.name
    flag_keys = {
        "objective": "train.objective", "steps": "train.steps", "rho": "train.rho", "direction": "train.direction",
        "log_interval": "eval.log_interval", "checkpoint_interval": "eval.checkpoint_interval",
    }
    for flag, key in flag_keys.items():
        if getattr(args, flag, None) is not None:
            rc.set(key, getattr(args, flag))
    if args.command == "gen-data" and args.n_pairs is not None:
        rc.n_pairs = args.n_pairs
    if args.command == "visualize" and args.n_pairs is not None:
        rc.eval.visualize_pairs = args.n_pairs
    rc = rc.resolved()
    rc.validate()
    return rc


def _prepare_dir(path: Path, force: bool, marker: str) -> None:
    if (path / marker).exists() and not force:
        raise UsageError(f"{path / marker} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _load_corpus(path: Path) -> list[ParallelPair]:
    if not path.exists():
        raise UsageError(f"corpus {path} does not exist (run gen-data first)")
    return read_corpus(path)


def _load_checkpoint(path: Path):
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _check_fit(pairs: Sequence[ParallelPair], cfg: EncoderConfig) -> None:
    top = max(max(max(p.source), max(p.pivot)) for p in pairs)
    if top >= cfg.V:
        raise ShapeError(f"corpus token id {top} exceeds checkpoint vocabulary V={cfg.V}")
    longest = max(max(len(p.source), len(p.pivot)) for p in pairs)
    if longest + 1 > cfg.S_max:
        raise ShapeError(f"corpus sentence length {longest} exceeds checkpoint S_max={cfg.S_max}")


# ---------------------------------------------------------------- commands


def cmd_gen_data(rc: RunConfig, force: bool) -> int:
    path = Path(rc.out)
    if not path.suffix:
        path = path / "corpus.tsv"
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    pairs = generate_corpus(rc.data, rc.n_pairs)
    write_corpus(pairs, path)
    rc.write(path.with_suffix(".config.json"))
    log.info("wrote %d pairs to %s", len(pairs), path)
    return EXIT_OK


@dataclass
class TrainOutcome:
    params: Any
    log: list[dict]
    diverged_at: int | None


def train_run(rc: RunConfig, pairs: Sequence[ParallelPair], run_dir: Path | None = None) -> TrainOutcome:
    """Train on the non-held-out part of ``pairs``; writes config, metrics and checkpoints when ``run_dir`` is set."""
    train_pairs, _ = split_heldout(pairs, rc.eval.heldout_frac)
    params = init_params(rc.model)
    hook = None
    if run_dir is not None:
        rc.write(run_dir / "config.json")
        ckpt = run_dir / "checkpoint.ckpt"
        hook = lambda p, step: save_checkpoint(p, p.config, ckpt)  # noqa: E731
        if rc.train.steps == 0 or rc.eval.checkpoint_interval:
            save_checkpoint(params, params.config, ckpt)
    res = train(params, train_pairs, rc.train, log_interval=rc.eval.log_interval,
                on_log=lambda e: log.info("%s", e), checkpoint=hook,
                checkpoint_interval=rc.eval.checkpoint_interval)
    if run_dir is not None:
        write_jsonl(res.log, run_dir / "metrics.jsonl")
        if res.diverged_at is None:
            save_checkpoint(res.params, res.params.config, run_dir / "checkpoint.ckpt")
    return TrainOutcome(res.params, res.log, res.diverged_at)


def cmd_train(rc: RunConfig, corpus: Path, force: bool) -> int:
    pairs = _load_corpus(corpus)
    _check_fit(pairs, rc.model)
    run_dir = rc.run_dir
    _prepare_dir(run_dir, force, "checkpoint.ckpt")
    out = train_run(rc, pairs, run_dir)
    if out.diverged_at is not None:
        log.error("training diverged at step %d; last good checkpoint kept", out.diverged_at)
        return EXIT_DIVERGED
    log.info("checkpoint written to %s", run_dir / "checkpoint.ckpt")
    return EXIT_OK


def eval_report(params, pairs: Sequence[ParallelPair], task: str, settings: EvalSettings) -> dict:
    _, held = split_heldout(pairs, settings.heldout_frac)
    if task == "mining":
        from .pipeline import eval_mining

        return eval_mining(embed_pairs(params, held), held, settings.k, settings.mining_mode, settings.m)
    return evaluate(params, held, task, settings.k)


def cmd_eval(rc: RunConfig, checkpoint: Path, corpus: Path, task: str, report: Path | None) -> int:
    params, cfg = _load_checkpoint(checkpoint)
    pairs = _load_corpus(corpus)
    _check_fit(pairs, cfg)
    result = eval_report(params, pairs, task, rc.eval)
    text = json.dumps(result, indent=2, sort_keys=True)
    print(text)
    path = report or checkpoint.parent / f"eval_{task}.json"
    path.write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


ABLATE_FIELDS = ["sweep", "value", "status", "retrieval_xx_en", "retrieval_en_xx", "retrieval_avg",
                 "token_alignment", "final_total", "error"]


def ablate_row(rc: RunConfig, pairs: Sequence[ParallelPair], sweep: str, value) -> dict:
    key, _ = SWEEPS[sweep]
    row_cfg = RunConfig.from_flat(rc.to_flat())
    row_cfg.set(key, value)
    row_cfg = row_cfg.resolved()
    row = {"sweep": sweep, "value": value}
    try:
        row_cfg.validate()
        out = train_run(row_cfg, pairs)
        if out.diverged_at is not None:
            raise RuntimeError(f"diverged at step {out.diverged_at}")
        ret = eval_report(out.params, pairs, "retrieval", rc.eval)["average"]
        tok = eval_report(out.params, pairs, "token-align", rc.eval)["average"]["token_alignment"]
        row.update(status="ok", retrieval_xx_en=ret["xx->en"], retrieval_en_xx=ret["en->xx"],
                   retrieval_avg=(ret["xx->en"] + ret["en->xx"]) / 2, token_alignment=tok,
                   final_total=out.log[-1]["total"] if out.log else None, error="")
    except Exception as exc:  # one failing row must not stop the sweep
        log.error("sweep %s=%s failed: %s", sweep, value, exc)
        row.update(status="failed", error=str(exc))
    return row


def cmd_ablate(rc: RunConfig, corpus: Path, sweep: str, force: bool) -> int:
    pairs = _load_corpus(corpus)
    run_dir = rc.run_dir
    _prepare_dir(run_dir, force, f"ablate_{sweep}.csv")
    rc.write(run_dir / "config.json")
    rows = [ablate_row(rc, pairs, sweep, v) for v in SWEEPS[sweep][1]]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=ABLATE_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    (run_dir / f"ablate_{sweep}.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(buf.getvalue(), end="")
    return EXIT_SWEEP if any(r["status"] != "ok" for r in rows) else EXIT_OK


def token_projection(params, pairs: Sequence[ParallelPair], n_pairs: int, seed: int):
    """PCA of every real token hidden (CLS excluded) of the first ``n_pairs`` held-out pairs."""
    _, held = split_heldout(pairs)
    if n_pairs > len(held):
        log.warning("requested %d pairs but only %d held out; clipping", n_pairs, len(held))
        n_pairs = len(held)
    held = held[:n_pairs]
    emb = embed_pairs(params, held)
    rows, vecs = [], []
    for i, p in enumerate(held):
        for side, toks, hid, lang in (("source", p.source, emb.src_tokens[i], p.lang_id),
                                      ("pivot", p.pivot, emb.piv_tokens[i], 0)):
            for pos, tok in enumerate(toks):
                rows.append((i, side, lang, pos, tok))
                vecs.append(hid[pos])
    proj = evalkit.pca_project(np.array(vecs), 2, seed=seed)
    return rows, proj


def cmd_visualize(rc: RunConfig, checkpoint: Path, corpus: Path, force: bool) -> int:
    params, cfg = _load_checkpoint(checkpoint)
    pairs = _load_corpus(corpus)
    _check_fit(pairs, cfg)
    rows, proj = token_projection(params, pairs, rc.eval.visualize_pairs, rc.train.seed)
    run_dir = rc.run_dir
    _prepare_dir(run_dir, force, "tokens.csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "side", "lang", "position", "token", "pc1", "pc2"])
    for (pair, side, lang, pos, tok), (x, y) in zip(rows, proj.points):
        writer.writerow([pair, side, lang, pos, tok, repr(float(x)), repr(float(y))])
    (run_dir / "tokens.csv").write_text(buf.getvalue(), encoding="utf-8")
    names = {0: "language 0 (pivot)", **{k: f"language {k}" for k in range(1, cfg.n_langs)}}
    svg = evalkit.scatter_svg(proj.points, [r[2] for r in rows], names)
    (run_dir / "tokens.svg").write_text(svg, encoding="utf-8")
    log.info("wrote %d token points to %s", len(rows), run_dir)
    return EXIT_OK


def cmd_flops(rc: RunConfig, paper_scale: bool, seq_len: int | None, as_json: bool) -> int:
    cfg = evalkit.PAPER_SCALE if paper_scale else rc.model
    s = seq_len or (evalkit.PAPER_SEQ_LEN if paper_scale else cfg.S_max - 1)
    rep = evalkit.estimate_flops(cfg, s)
    if as_json:
        print(json.dumps({"seq_len": s, "totals": rep.totals, "components": rep.components}, indent=2))
        return EXIT_OK
    tr = rep.totals["tr"]
    print(f"{'objective':<8} {'total GFLOPs':>13} {'encoder':>10} {'rtl_head':>10} {'vocab':>10} {'vs TR':>8}")
    for name, total in rep.totals.items():
        c = rep.components[name]
        print(f"{name:<8} {total / 1e9:>13.3f} {c['encoder'] / 1e9:>10.3f} {c['rtl_head'] / 1e9:>10.3f} "
              f"{c['vocab_projection'] / 1e9:>10.3f} {total / tr - 1:>+8.1%}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen-data" and args.n_pairs is not None and args.n_pairs < 1:
            raise UsageError("--n-pairs must be >= 1")
        rc = load_run_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(rc, args.force)
        if args.command == "train":
            return cmd_train(rc, args.corpus, args.force)
        if args.command == "eval":
            return cmd_eval(rc, args.checkpoint, args.corpus, args.task, args.report)
        if args.command == "ablate":
            return cmd_ablate(rc, args.corpus, args.sweep, args.force)
        if args.command == "visualize":
            return cmd_visualize(rc, args.checkpoint, args.corpus, args.force)
        return cmd_flops(rc, args.paper_scale, args.seq_len, args.json)
    except (ValueError, ShapeError) as exc:
        print(f"dap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
