"""Command-line entry point: datagen, train, eval, compare.

Each subcommand reads an INI config (sections [data], [model], [train],
[eval]) with flag overrides, resolves every relative path against
``--out-dir``, writes its primary artifacts deterministically, and ends by
atomically writing a JSON run manifest with the resolved config, seeds,
artifact checksums, and wall-clock duration (timestamps live only there).
Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import datagen, evaluation, model as nn, training
from .codec import VOCAB
from .training import DivergenceError


class ConfigError(Exception):
    pass


_DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "task": "valency_electrons",
        "train_sizes": "5000",
        "val_size": "200",
        "test_size": "200",
        "min_nodes": "2",
        "max_nodes": "8",
        "max_degree": "4",
        "seed": "0",
    },
    "model": {
        "embed_dim": "64",
        "num_layers": "2",
        "num_heads": "4",
        "ff_dim": "256",
        "max_seq_len": "512",
        "mp_mode": "none",
        "mp_after_layers": "all",
        "gate_enabled": "true",
        "seed": "0",
    },
    "train": {
        "learning_rate": "3e-4",
        "beta1": "0.9",
        "beta2": "0.999",
        "adam_eps": "1e-8",
        "weight_decay": "1e-7",
        "grad_clip_norm": "1.0",
        "batch_size": "16",
        "epochs": "30",
        "seed": "0",
        "loss": "per_example",
        "train_file": "",
        "val_file": "val.txt",
        "checkpoint_file": "checkpoint.bin",
        "log_file": "train_log.txt",
    },
    "eval": {
        "checkpoint_file": "checkpoint.bin",
        "test_file": "test.txt",
        "report_prefix": "report",
        "repeats": "3",
        "seed": "0",
        "seeds": "",
        "temperature": "1.0",
        "top_k": "0",
        "greedy": "false",
        "max_new_tokens": "256",
        "batch_size": "16",
    },
}


def load_config(path: str | None) -> dict[str, dict[str, str]]:
    config = {section: dict(values) for section, values in _DEFAULTS.items()}
    if path is None:
        return config
    parser = configparser.ConfigParser()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in config:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in config[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            config[section][key] = value
    return config


def apply_overrides(config: dict[str, dict[str, str]], pairs: list[str]) -> None:
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {pair!r}")
        target, value = pair.split("=", 1)
        section, key = target.split(".", 1)
        if section not in config or key not in config[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        config[section][key] = value


def _as_int(config, section, key) -> int:
    try:
        return int(config[section][key])
    except ValueError as exc:
        raise ConfigError(f"{section}.{key} must be an integer") from exc


def _as_float(config, section, key) -> float:
    try:
        return float(config[section][key])
    except ValueError as exc:
        raise ConfigError(f"{section}.{key} must be a number") from exc


def _as_bool(config, section, key) -> bool:
    text = config[section][key].strip().lower()
    if text in ("true", "1", "yes"):
        return True
    if text in ("false", "0", "no"):
        return False
    raise ConfigError(f"{section}.{key} must be true or false")


def _as_int_list(config, section, key) -> list[int]:
    text = config[section][key].strip()
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"{section}.{key} must be comma-separated integers") from exc


def _resolve(out_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_text(path: str, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_manifest(out_dir: str, command: str, argv: list[str], config, seeds, inputs, outputs, started: float) -> str:
    manifest = {
        "command": [command] + argv,
        "config": config,
        "seeds": seeds,
        "inputs": sorted(os.path.abspath(p) for p in inputs),
        "outputs": sorted(os.path.abspath(p) for p in outputs),
        "checksums": {os.path.basename(p): _sha256(p) for p in sorted(outputs)},
        "duration_seconds": time.monotonic() - started,
    }
    path = os.path.join(out_dir, f"{command}_manifest.json")
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _model_config(config) -> nn.ModelConfig:
    layers_text = config["model"]["mp_after_layers"].strip().lower()
    mp_after = None if layers_text in ("", "all") else tuple(_as_int_list(config, "model", "mp_after_layers"))
    try:
        return nn.ModelConfig(
            vocab_size=len(VOCAB),
            embed_dim=_as_int(config, "model", "embed_dim"),
            num_layers=_as_int(config, "model", "num_layers"),
            num_heads=_as_int(config, "model", "num_heads"),
            ff_dim=_as_int(config, "model", "ff_dim"),
            max_seq_len=_as_int(config, "model", "max_seq_len"),
            mp_mode=config["model"]["mp_mode"],
            mp_after_layers=mp_after,
            gate_enabled=_as_bool(config, "model", "gate_enabled"),
            seed=_as_int(config, "model", "seed"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_datagen(args, config) -> int:
    started = time.monotonic()
    sizes = _as_int_list(config, "data", "train_sizes")
    if not sizes:
        raise ConfigError("data.train_sizes must list at least one size")
    try:
        spec = datagen.DatasetSpec(
            task=config["data"]["task"],
            train_size=max(sizes),
            val_size=_as_int(config, "data", "val_size"),
            test_size=_as_int(config, "data", "test_size"),
            min_nodes=_as_int(config, "data", "min_nodes"),
            max_nodes=_as_int(config, "data", "max_nodes"),
            max_degree=_as_int(config, "data", "max_degree"),
            seed=_as_int(config, "data", "seed"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    paths = datagen.generate_dataset(spec, args.out_dir, sizes)
    manifest = _write_manifest(
        args.out_dir, "datagen", args.raw_argv, config, [spec.seed], [], list(paths.values()), started
    )
    print(f"wrote {len(paths)} files; manifest {manifest}")
    return 0


def cmd_train(args, config) -> int:
    started = time.monotonic()
    train_file = config["train"]["train_file"]
    if not train_file:
        raise ConfigError("train.train_file must be set")
    train_path = _resolve(args.out_dir, train_file)
    val_path = _resolve(args.out_dir, config["train"]["val_file"])
    train_records = datagen.read_records(train_path)
    val_records = datagen.read_records(val_path)
    model_config = _model_config(config)
    try:
        tcfg = training.TrainConfig(
            learning_rate=_as_float(config, "train", "learning_rate"),
            beta1=_as_float(config, "train", "beta1"),
            beta2=_as_float(config, "train", "beta2"),
            adam_eps=_as_float(config, "train", "adam_eps"),
            weight_decay=_as_float(config, "train", "weight_decay"),
            grad_clip_norm=_as_float(config, "train", "grad_clip_norm"),
            batch_size=_as_int(config, "train", "batch_size"),
            max_epochs=_as_int(config, "train", "epochs"),
            seed=_as_int(config, "train", "seed"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    kind = config["train"]["loss"]
    prepared_train = training.prepare_dataset([(r.desc, r.graph) for r in train_records], model_config.mp_mode)
    prepared_val = training.prepare_dataset([(r.desc, r.graph) for r in val_records], model_config.mp_mode)
    try:
        if kind == "expected_tokens":
            expected = training.estimate_expected_tokens(prepared_train, tcfg.batch_size, tcfg.seed)
            loss_spec = training.LossSpec(kind=kind, expected_token_count=expected)
        else:
            loss_spec = training.LossSpec(kind=kind)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    result = training.train(model_config, prepared_train, prepared_val, tcfg, loss_spec)

    checkpoint_path = _resolve(args.out_dir, config["train"]["checkpoint_file"])
    log_path = _resolve(args.out_dir, config["train"]["log_file"])
    extra = {f"adam.m.{k}": v for k, v in result.adam_state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in result.adam_state.v.items()})
    extra["adam.step"] = np.asarray(float(result.adam_state.step))
    extra["best_epoch"] = np.asarray(float(result.best_epoch))
    extra["best_val_loss"] = np.asarray(result.best_val_loss)
    extra["val_losses"] = np.asarray(result.val_losses)
    os.makedirs(os.path.dirname(checkpoint_path) or ".", exist_ok=True)
    nn.save_checkpoint(checkpoint_path, model_config, result.params, extra)
    _write_text(log_path, "\n".join(result.log) + "\n")
    manifest = _write_manifest(
        args.out_dir,
        "train",
        args.raw_argv,
        config,
        [model_config.seed, tcfg.seed],
        [train_path, val_path],
        [checkpoint_path, log_path],
        started,
    )
    print(
        f"trained {result.steps_run} steps; best epoch {result.best_epoch} "
        f"(val loss {result.best_val_loss:.6g}); manifest {manifest}"
    )
    return 0


def cmd_eval(args, config) -> int:
    started = time.monotonic()
    checkpoint_path = _resolve(args.out_dir, config["eval"]["checkpoint_file"])
    test_path = _resolve(args.out_dir, config["eval"]["test_file"])
    if not os.path.exists(checkpoint_path):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint_path}")
    model_config, params, _extra = nn.load_checkpoint(checkpoint_path)
    records = datagen.read_records(test_path)
    repeats = _as_int(config, "eval", "repeats")
    seeds = _as_int_list(config, "eval", "seeds")
    if not seeds:
        base = _as_int(config, "eval", "seed")
        seeds = [base + i for i in range(repeats)]
    if len(seeds) != repeats:
        raise ConfigError("eval.seeds must list one seed per repeat")
    policy = nn.SamplePolicy(
        greedy=_as_bool(config, "eval", "greedy"),
        temperature=_as_float(config, "eval", "temperature"),
        top_k=_as_int(config, "eval", "top_k"),
    )
    report = evaluation.evaluate(
        params,
        model_config,
        records,
        n_repeats=repeats,
        seeds=seeds,
        policy=policy,
        max_new_tokens=_as_int(config, "eval", "max_new_tokens"),
        sample_batch_size=_as_int(config, "eval", "batch_size"),
        checkpoint_id=_sha256(checkpoint_path)[:16],
    )
    prefix = config["eval"]["report_prefix"]
    text_path = _resolve(args.out_dir, f"{prefix}.txt")
    machine_path = _resolve(args.out_dir, f"{prefix}_machine.txt")
    samples_path = _resolve(args.out_dir, f"{prefix}_samples.txt")
    _write_text(text_path, evaluation.report_text(report))
    _write_text(machine_path, "\n".join(evaluation.report_machine_lines(report)) + "\n")
    sample_lines = []
    for run_idx, run_samples in enumerate(report.samples):
        for s in run_samples:
            value1 = f"{s.value1:.10g}" if s.value1 is not None else "-"
            sample_lines.append(
                f"run={run_idx}\tprompt={s.index}\ttarget={s.target:.10g}\tparsable1={s.parsable1}"
                f"\tparsable2={s.parsable2}\tvalue1={value1}\tdiversity={s.diversity}"
                f"\tsample1={s.sample1}\tsample2={s.sample2}"
            )
    _write_text(samples_path, "\n".join(sample_lines) + "\n")
    manifest = _write_manifest(
        args.out_dir,
        "eval",
        args.raw_argv,
        config,
        seeds,
        [checkpoint_path, test_path],
        [text_path, machine_path, samples_path],
        started,
    )
    print(evaluation.report_text(report), end="")
    print(f"manifest {manifest}")
    return 0


def cmd_compare(args, config) -> int:
    started = time.monotonic()
    path_a = _resolve(args.out_dir, args.report_a)
    path_b = _resolve(args.out_dir, args.report_b)
    with open(path_a, "r", encoding="utf-8") as fh:
        parsed_a = evaluation.parse_machine_report(fh.read())
    with open(path_b, "r", encoding="utf-8") as fh:
        parsed_b = evaluation.parse_machine_report(fh.read())
    try:
        rows = evaluation.compare_reports(parsed_a, parsed_b, welch=args.welch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    lines = [f"task: {parsed_a.task}", f"reports: {args.report_a} vs {args.report_b}"]
    header = ("metric", "mean_a", "mean_b", "t", "p", "significant")
    table = [header]
    for row in rows:
        table.append(
            (
                row["metric"],
                f"{row['mean_a']:.6f}",
                f"{row['mean_b']:.6f}",
                f"{row['t']:.4f}",
                f"{row['p']:.6f}",
                "yes" if row["significant"] else "no",
            )
        )
    widths = [max(len(r[c]) for r in table) for c in range(len(header))]
    lines.extend("  ".join(r[c].ljust(widths[c]) for c in range(len(header))).rstrip() for r in table)
    lines.extend(
        f"compare metric={row['metric']} mean_a={row['mean_a']:.10g} mean_b={row['mean_b']:.10g} "
        f"t={row['t']:.10g} p={row['p']:.10g} significant={int(row['significant'])}"
        for row in rows
    )
    out_path = _resolve(args.out_dir, args.output)
    _write_text(out_path, "\n".join(lines) + "\n")
    manifest = _write_manifest(
        args.out_dir, "compare", args.raw_argv, config, [], [path_a, path_b], [out_path], started
    )
    print("\n".join(lines))
    print(f"manifest {manifest}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphseq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("datagen", "train", "eval", "compare"):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out-dir", default=".", help="base directory for all relative paths")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        if name == "train":
            p.add_argument("--mp-mode", choices=nn.MP_MODES, default=None)
            p.add_argument("--loss", choices=training.LOSS_KINDS, default=None)
            p.add_argument("--gate-enabled", choices=("true", "false"), default=None)
        if name == "eval":
            p.add_argument("--checkpoint", default=None)
            p.add_argument("--test-file", default=None)
            p.add_argument("--repeats", type=int, default=None)
        if name == "compare":
            p.add_argument("report_a")
            p.add_argument("report_b")
            p.add_argument("--output", default="compare.txt")
            p.add_argument("--welch", action="store_true")
    return parser


def _dispatch(argv: list[str]) -> int:
    args = _build_parser().parse_args(argv)
    args.raw_argv = list(argv)
    config = load_config(args.config)
    apply_overrides(config, args.overrides)
    if args.command == "train":
        if args.mp_mode is not None:
            config["model"]["mp_mode"] = args.mp_mode
        if args.loss is not None:
            config["train"]["loss"] = args.loss
        if args.gate_enabled is not None:
            config["model"]["gate_enabled"] = args.gate_enabled
    if args.command == "eval":
        if args.checkpoint is not None:
            config["eval"]["checkpoint_file"] = args.checkpoint
        if args.test_file is not None:
            config["eval"]["test_file"] = args.test_file
        if args.repeats is not None:
            config["eval"]["repeats"] = str(args.repeats)
    os.makedirs(args.out_dir, exist_ok=True)
    handler = {
        "datagen": cmd_datagen,
        "train": cmd_train,
        "eval": cmd_eval,
        "compare": cmd_compare,
    }[args.command]
    return handler(args, config)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _dispatch(argv)
    except SystemExit as exc:  # argparse failures already use exit code 2
        return int(exc.code or 0)
    except (ConfigError, datagen.InfeasibleSpecError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    except nn.CheckpointError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
