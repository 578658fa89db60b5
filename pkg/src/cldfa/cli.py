"""Command-line driver for the two-step pipeline.

Configuration is an INI file (sections ``run``, ``synthetic`` or ``data``,
``model``, ``source``, ``target``, ``finetune``, ``eval``); any key can be
overridden with ``--set section.key=value``.  Every command writes its
artifacts under the run's output directory and records them, with content
hashes, in ``manifest.json``.

Exit codes: 0 success, 1 configuration error, 2 missing dependency,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import __version__
from .corpus import (
    CorpusFormatError,
    LabeledSet,
    ParallelCorpus,
    SyntheticBilingualSpec,
    SyntheticSpecError,
    UnlabeledSet,
    Vocabulary,
    build_vocab,
    encode_texts,
    generate_synthetic_bilingual,
    merge_unlabeled,
    read_labeled_tsv,
    read_parallel_tsv,
    read_text_lines,
    shifted_spec,
    tokenize,
)
from .distill import (
    AdversarialConfig,
    TemperatureEnsemble,
    TrainConfig,
    fine_tune_target,
    soft_labels,
    train_source,
    train_target_distill,
    write_trace_csv,
)
from .evaluation import accuracy, divergence_score, project_features_2d, proportion_test
from .kcnn import KcnnConfig, dump_features, load_checkpoint, save_checkpoint
from .nn_core import NumericalError, OptimizerConfig

log = logging.getLogger("cldfa")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


class MissingDependency(Exception):
    pass


DEFAULTS = {
    "run": {"seed": "0", "out": "runs/default"},
    "model": {
        "emb_dim": "50",
        "window_sizes": "3,4,5",
        "num_filters": "100",
        "max_len": "100",
        "min_count": "1",
        "max_vocab": "",
        "num_classes": "",
    },
    "source": {
        "epochs": "10",
        "batch_size": "50",
        "optimizer": "adam",
        "lr": "0.001",
        "clip_norm": "5.0",
        "adversarial": "no",
        "alpha": "0.1",
        "disc_hidden": "100",
        "disc_lr": "",
        "ramp": "constant",
    },
    "target": {
        "epochs": "10",
        "batch_size": "50",
        "optimizer": "adam",
        "lr": "0.001",
        "clip_norm": "5.0",
        "adversarial": "no",
        "alpha": "0.1",
        "disc_hidden": "100",
        "disc_lr": "",
        "ramp": "constant",
        "temperature": "5",
        "temperatures": "",
        "t2_scaling": "no",
    },
    "finetune": {"labels": "50", "epochs": "10", "batch_size": "50", "lr": "0.001", "optimizer": "adam"},
    "eval": {"reference_accuracy": ""},
}

SYNTH_KEYS = {
    "vocab_size": int,
    "num_classes": int,
    "signal_tokens_per_class": int,
    "signal_prob": float,
    "num_topics": int,
    "topic_tokens_per_topic": int,
    "topic_prob": float,
    "cipher_seed": int,
}

DATA_FILES = ("l_src", "u_src", "u_parl", "t_tgt", "u_tgt", "l_tgt")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_config(path: str | None, overrides: list[str]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {path} not found")
        if p.suffix == ".json":
            cp.read_string(json.loads(p.read_text(encoding="utf-8"))["config"])
        else:
            cp.read(p, encoding="utf-8")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, option = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        if not cp.has_section(section):
            cp.add_section(section)
        cp.set(section, option, value.strip())
    validate_config(cp)
    return cp


def config_text(cp: configparser.ConfigParser) -> str:
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def validate_config(cp: configparser.ConfigParser) -> None:
    has_synth = cp.has_section("synthetic")
    has_data = cp.has_section("data")
    if has_synth == has_data:
        raise ConfigError("exactly one of [synthetic] or [data] must be present")
    try:
        if has_synth:
            synthetic_spec(cp).validate()
        else:
            for key in ("l_src", "u_parl", "t_tgt"):
                if not cp.get("data", key, fallback=""):
                    raise ConfigError(f"[data] needs {key}")
        model_config(cp)
        for section in ("source", "target"):
            train_config(cp, section)
        finetune_config(cp)
    except (ValueError, SyntheticSpecError) as exc:
        raise ConfigError(str(exc)) from None


def synthetic_spec(cp: configparser.ConfigParser) -> SyntheticBilingualSpec:
    s = cp["synthetic"]
    kwargs = {k: conv(s[k]) for k, conv in SYNTH_KEYS.items() if k in s}
    if "doc_len" in s:
        lo, hi = (int(x) for x in s["doc_len"].split(","))
        kwargs["doc_len"] = (lo, hi)
    kwargs["sizes"] = {name: int(s.get(f"n_{name}", d)) for name, d in
                       {"l_src": 2000, "u_src": 0, "u_parl": 2000, "t_tgt": 1000, "u_tgt": 0, "l_tgt": 0}.items()}
    kwargs["identity_cipher"] = s.getboolean("identity_cipher", fallback=False)
    if "class_signal" in s:
        kwargs["class_signal"] = tuple(
            tuple(int(t) for t in group.split()) for group in s["class_signal"].split(";") if group.strip()
        )
    shift = float(s.get("shift", "0") or 0)
    spec = shifted_spec(shift, **kwargs) if shift > 0 else SyntheticBilingualSpec(**kwargs)
    return spec


def num_classes(cp: configparser.ConfigParser) -> int:
    raw = cp.get("model", "num_classes", fallback="")
    if raw:
        return int(raw)
    if cp.has_section("synthetic"):
        return int(cp.get("synthetic", "num_classes", fallback="2"))
    raise ConfigError("[model] num_classes is required for file-based data")


def model_config(cp: configparser.ConfigParser) -> KcnnConfig:
    m = cp["model"]
    return KcnnConfig(
        num_classes=num_classes(cp),
        emb_dim=int(m["emb_dim"]),
        window_sizes=tuple(int(x) for x in m["window_sizes"].split(",")),
        num_filters=int(m["num_filters"]),
        max_len=int(m["max_len"]),
    )


def _optimizer(section) -> OptimizerConfig:
    clip = section.get("clip_norm", "5.0")
    return OptimizerConfig(
        algorithm=section.get("optimizer", "adam"),
        lr=float(section.get("lr", "0.001")),
        clip_norm=float(clip) if clip else None,
    )


def train_config(cp: configparser.ConfigParser, name: str) -> TrainConfig:
    s = cp[name]
    adv = None
    if s.getboolean("adversarial"):
        disc_lr = s.get("disc_lr", "")
        adv = AdversarialConfig(
            alpha=float(s["alpha"]),
            hidden=int(s["disc_hidden"]),
            ramp=s["ramp"],
            disc_lr=float(disc_lr) if disc_lr else None,
        )
    temps = _floats(s.get("temperatures", "")) or None
    return TrainConfig(
        temperature=float(s.get("temperature", "1")),
        temperatures=temps,
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        optimizer=_optimizer(s),
        adversarial=adv,
        seed=cp.getint("run", "seed"),
        t2_scaling=s.getboolean("t2_scaling", fallback=False),
    )


def finetune_config(cp: configparser.ConfigParser) -> tuple[int, TrainConfig]:
    s = cp["finetune"]
    labels = int(s["labels"])
    if labels < 0:
        raise ValueError("finetune labels must be >= 0")
    cfg = TrainConfig(
        temperature=1.0,
        epochs=int(s["epochs"]),
        batch_size=int(s["batch_size"]),
        optimizer=_optimizer(s),
        seed=cp.getint("run", "seed"),
    )
    return labels, cfg


# ---------------------------------------------------------------------------
# Run context: paths, data, manifest
# ---------------------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Run:
    cp: configparser.ConfigParser

    @property
    def out(self) -> Path:
        return Path(self.cp.get("run", "out"))

    def data_path(self, name: str) -> Path | None:
        if self.cp.has_section("synthetic"):
            ext = ".txt" if name in ("u_src", "u_tgt") else ".tsv"
            return self.out / "data" / f"{name}{ext}"
        raw = self.cp.get("data", name, fallback="")
        return Path(raw) if raw else None

    def require(self, path: Path | None, what: str) -> Path:
        if path is None or not path.exists():
            raise MissingDependency(f"missing {what}: {path}")
        return path

    def optional(self, name: str) -> Path | None:
        p = self.data_path(name)
        return p if p is not None and p.exists() and p.stat().st_size > 0 else None

    def embeddings(self, side: str) -> str | None:
        if not self.cp.has_section("data"):
            return None
        raw = self.cp.get("data", f"{side}_embeddings", fallback="")
        return raw or None

    # -- vocabularies are pure functions of the unlabeled text of each side

    def source_texts(self) -> dict[str, list[str]]:
        texts = {"l_src": read_labeled_tsv(self.require(self.data_path("l_src"), "L_src file"))[1]}
        texts["u_parl"] = read_parallel_tsv(self.require(self.data_path("u_parl"), "U_parl file"))[0]
        if self.optional("u_src"):
            texts["u_src"] = read_text_lines(self.data_path("u_src"))
        return texts

    def target_texts(self) -> dict[str, list[str]]:
        # Only the text column of T_tgt is read here; its labels never leave cmd_eval.
        texts = {"u_parl": read_parallel_tsv(self.require(self.data_path("u_parl"), "U_parl file"))[1]}
        texts["t_tgt"] = read_labeled_tsv(self.require(self.data_path("t_tgt"), "T_tgt file"))[1]
        if self.optional("u_tgt"):
            texts["u_tgt"] = read_text_lines(self.data_path("u_tgt"))
        return texts

    def _vocab(self, texts: dict[str, list[str]]) -> Vocabulary:
        m = self.cp["model"]
        max_vocab = m.get("max_vocab", "")
        return build_vocab(
            (tokenize(t) for group in texts.values() for t in group),
            min_count=int(m["min_count"]),
            max_size=int(max_vocab) if max_vocab else None,
        )

    def source_vocab(self) -> Vocabulary:
        return self._vocab(self.source_texts())

    def target_vocab(self) -> Vocabulary:
        return self._vocab(self.target_texts())

    @property
    def max_len(self) -> int:
        return self.cp.getint("model", "max_len")

    def parallel(self, src_vocab: Vocabulary, tgt_vocab: Vocabulary) -> ParallelCorpus:
        src, tgt = read_parallel_tsv(self.require(self.data_path("u_parl"), "U_parl file"))
        return ParallelCorpus(
            encode_texts(src, src_vocab, self.max_len),
            encode_texts(tgt, tgt_vocab, self.max_len),
            src_vocab.vocab_id,
            tgt_vocab.vocab_id,
        )

    def labeled(self, name: str, vocab: Vocabulary) -> LabeledSet:
        labels, texts = read_labeled_tsv(self.require(self.data_path(name), f"{name} file"))
        return LabeledSet(encode_texts(texts, vocab, self.max_len), labels, name, vocab.vocab_id)

    def target_adaptation_set(self, vocab: Vocabulary) -> UnlabeledSet:
        texts = self.target_texts()
        sets = [UnlabeledSet(encode_texts(texts["t_tgt"], vocab, self.max_len), "t_tgt", vocab.vocab_id)]
        if "u_tgt" in texts:
            sets.append(UnlabeledSet(encode_texts(texts["u_tgt"], vocab, self.max_len), "u_tgt", vocab.vocab_id))
        return merge_unlabeled(sets, "t_tgt+u_tgt")

    # -- manifest

    @property
    def manifest_path(self) -> Path:
        return self.out / "manifest.json"

    def load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {"artifacts": {}, "timings": {}}

    def record(self, command: str, files: list[Path], seconds: float) -> None:
        manifest = self.load_manifest()
        manifest["tool_version"] = __version__
        manifest["format"] = "cldfa-manifest/1"
        manifest["config"] = config_text(self.cp)
        for f in files:
            manifest["artifacts"][str(f.relative_to(self.out))] = sha256_file(f)
        manifest["timings"][command] = round(seconds, 3)
        manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        (self.out / "config.resolved.ini").write_text(config_text(self.cp), encoding="utf-8")

    def target_checkpoints(self) -> list[Path]:
        temps = _floats(self.cp.get("target", "temperatures", fallback=""))
        if temps:
            return [self.out / f"target_T{t:g}.ckpt" for t in temps]
        return [self.out / "target.ckpt"]


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(run: Run) -> list[Path]:
    if not run.cp.has_section("synthetic"):
        raise ConfigError("synth needs a [synthetic] section")
    corpus = generate_synthetic_bilingual(synthetic_spec(run.cp), run.cp.getint("run", "seed"))
    return list(corpus.write_tsv(run.out / "data").values())


def cmd_train_source(run: Run) -> list[Path]:
    vocab = run.source_vocab()
    mc = model_config(run.cp)
    cfg = train_config(run.cp, "source")
    l_src = run.labeled("l_src", vocab)
    parallel_src = UnlabeledSet(
        encode_texts(run.source_texts()["u_parl"], vocab, run.max_len), "u_parl_src", vocab.vocab_id
    )
    result = train_source(l_src, parallel_src, vocab, mc, cfg, run.embeddings("src"))
    ckpt = save_checkpoint(run.out / "source.ckpt", result.model, result.optimizer, vocab, {"role": "source"})
    trace = write_trace_csv(run.out / "source_trace.csv", result.trace)
    return [ckpt, trace]


def _load(path: Path, what: str):
    if not path.exists():
        raise MissingDependency(f"missing {what}: {path}")
    return load_checkpoint(path)


def cmd_distill(run: Run) -> list[Path]:
    src = _load(run.out / "source.ckpt", "source checkpoint (run train-source first)")
    tgt_vocab = run.target_vocab()
    parallel = run.parallel(src.vocab, tgt_vocab)
    adapt = run.target_adaptation_set(tgt_vocab)
    mc = model_config(run.cp)
    cfg = train_config(run.cp, "target")
    files = []
    temps = cfg.temperatures or (cfg.temperature,)
    ckpts = run.target_checkpoints()
    for i, (T, ckpt_path) in enumerate(zip(temps, ckpts)):
        member_cfg = replace(cfg, temperature=float(T), temperatures=None, seed=cfg.seed + i)
        soft = soft_labels(src.model, parallel, T)
        suffix = "" if len(temps) == 1 and not cfg.temperatures else f"_T{T:g}"
        files.append(soft.write_csv(run.out / f"soft_labels{suffix}.csv"))
        result = train_target_distill(parallel, soft, adapt, tgt_vocab, mc, member_cfg, run.embeddings("tgt"))
        extra = {"role": "target", "temperature": float(T), "source_hash": soft.source_hash}
        files.append(save_checkpoint(ckpt_path, result.model, result.optimizer, tgt_vocab, extra))
        files.append(write_trace_csv(run.out / f"target_trace{suffix}.csv", result.trace))
    return files


def _predictor(run: Run):
    ckpts = [_load(p, "target checkpoint (run distill first)") for p in run.target_checkpoints()]
    if len(ckpts) == 1:
        return ckpts[0].model, ckpts[0].vocab
    temps = [c.extra.get("temperature") for c in ckpts]
    return TemperatureEnsemble([c.model for c in ckpts], temps), ckpts[0].vocab


def cmd_finetune(run: Run) -> list[Path]:
    ckpt = _load(run.target_checkpoints()[0], "target checkpoint (run distill first)")
    budget, cfg = finetune_config(run.cp)
    pool = run.labeled("l_tgt", ckpt.vocab)
    labeled = pool.subset(range(min(budget, len(pool))), f"l_tgt[:{budget}]")
    eval_set = run.labeled("t_tgt", ckpt.vocab) if run.optional("t_tgt") else None
    result = fine_tune_target(ckpt.model, labeled, cfg, eval_set)
    files = [save_checkpoint(run.out / "finetune.ckpt", result.model, result.optimizer, ckpt.vocab,
                             {"role": "finetune", "labels": len(labeled)})]
    curve = run.out / "finetune_curve.csv"
    curve.write_text("epoch,accuracy\n" + "".join(f"{i},{a!r}\n" for i, a in enumerate(result.metrics)), encoding="utf-8")
    files.append(curve)
    return files


def cmd_eval(run: Run) -> list[Path]:
    predictor, vocab = _predictor(run)
    t_tgt = run.labeled("t_tgt", vocab)
    report = accuracy(predictor, t_tgt, "+".join(sha256_file(p)[:12] for p in run.target_checkpoints()))
    files = [report.write_csv(run.out / "report.csv")]
    ref = run.cp.get("eval", "reference_accuracy", fallback="")
    if ref:
        test = proportion_test(report.accuracy, float(ref), report.n)
        sig = run.out / "significance.csv"
        sig.write_text(
            f"accuracy,reference,n,z,p_value,significant\n{report.accuracy!r},{float(ref)!r},{report.n},"
            f"{test.z!r},{test.p_value!r},{int(test.significant)}\n",
            encoding="utf-8",
        )
        files.append(sig)
    print(f"accuracy on {t_tgt.name}: {report.accuracy:.4f} (n={report.n})")
    return files


def cmd_project(run: Run) -> list[Path]:
    src = _load(run.out / "source.ckpt", "source checkpoint (run train-source first)")
    l_src = run.labeled("l_src", src.vocab).unlabeled()
    par_src = UnlabeledSet(
        encode_texts(run.source_texts()["u_parl"], src.vocab, run.max_len), "u_parl", src.vocab.vocab_id
    )
    feats_csv = dump_features(run.out / "features.csv", src.model, [("l_src", l_src), ("u_parl", par_src)])
    fa, fb = src.model.extract_features(l_src), src.model.extract_features(par_src)
    proj = project_features_2d({"l_src": fa, "u_parl": fb})
    score = divergence_score(fa, fb)
    div = run.out / "divergence.csv"
    div.write_text(f"split_a,split_b,score\nl_src,u_parl,{score!r}\n", encoding="utf-8")
    print(f"divergence(l_src, u_parl) = {score:.4f}")
    return [feats_csv, proj.write_csv(run.out / "projection.csv"), proj.write_svg(run.out / "projection.svg"), div]


def cmd_run_cldfa(run: Run) -> list[Path]:
    files = []
    steps = []
    if run.cp.has_section("synthetic"):
        steps.append(("synth", cmd_synth))
    steps += [("train-source", cmd_train_source), ("distill", cmd_distill), ("eval", cmd_eval)]
    for name, fn in steps:
        t0 = time.perf_counter()
        produced = fn(run)
        run.record(name, produced, time.perf_counter() - t0)
        files += produced
    return files


COMMANDS = {
    "synth": cmd_synth,
    "train-source": cmd_train_source,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "project": cmd_project,
    "run-cldfa": cmd_run_cldfa,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cldfa", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI config file, or a manifest.json to rerun")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"run.out={args.out}")
    try:
        run = Run(load_config(args.config, overrides))
        t0 = time.perf_counter()
        files = COMMANDS[args.command](run)
        if args.command != "run-cldfa":
            run.record(args.command, files, time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SyntheticSpecError, CorpusFormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingDependency as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
