"""Command-line front door: pretrain, fingerprint, attack, verify, explain,
ablate. Every command writes a run manifest (config snapshot, seeds, input
and output digests); reruns with the same seed are byte-identical except
timestamps.

Exit codes: 0 ok, 1 unexpected, 2 config error, 3 training/calibration
failure, 4 incompatible or corrupt artifact, 10/11 piracy/independent
verdict when --exit-verdict is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import seeds
from .attacks import (AttackConfig, NoisyOracle, ShuffledOracle, extract_model,
                      finetune, prune)
from .data import DatasetLayout, ImageDataset, load_image_dataset, sample_query_set, synth_dataset
from .encoders import (EncoderOracle, EncoderSpec, SSLConfig, build_encoder,
                       load_encoder, pretrain_ssl, save_encoder)
from .errors import (CalibrationError, ConfigError, CorruptionError, FormatError,
                     IncompatibleOracleError, StegoFPError, TrainingError, VersionError)
from .explain import gradcam_stego, psnr, ssim, write_heatmap_pgm
from .fingerprint import TrainConfig, load_bundle, save_bundle, train_fingerprint
from .serialization import canonical_digest, file_digest
from .stego import binarize
from .verify import calibrate_threshold, compute_ebr, run_queries, verify

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_INCOMPATIBLE = 4
EXIT_PIRACY = 10
EXIT_INDEPENDENT = 11


def load_config(path) -> dict:
    if not path or not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        cfg = json.load(fh)
    sig = cfg.get("verify", {}).get("significance", 0.05)
    if not 0 < sig < 1:
        raise ConfigError("significance must be in (0, 1)")
    return cfg


def master_seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("SG_SEED")
    if env is not None:
        return int(env)
    return int(cfg.get("master_seed", 0))


def dataset_from_config(section: dict, seed: int) -> ImageDataset:
    kind = section.get("kind", "synth")
    if kind == "synth":
        return synth_dataset(section.get("seed", seeds.substream(seed, seeds.DATA)),
                             section.get("n", 5000), section.get("size", 32))
    if kind == "raw":
        layout = DatasetLayout(section["size"], section.get("channel_order", "chw"),
                               section.get("label_byte", False))
        return load_image_dataset(section["path"], layout)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def make_run_dir(cfg: dict, command: str) -> str:
    base = cfg.get("output_dir", "runs")
    digest = canonical_digest({"config": cfg, "command": command})[:12]
    stamp = time.strftime("%Y%m%d-%H%M%S")
    path = os.path.join(base, f"{stamp}-{digest}")
    for sub in ("weights", "bundles", "reports", "csv"):
        os.makedirs(os.path.join(path, sub), exist_ok=True)
    return path


def write_manifest(run_dir: str, command: str, cfg: dict, seed: int,
                   inputs: dict, outputs: dict) -> None:
    body = {
        "command": command,
        "config": cfg,
        "master_seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    manifest = dict(body)
    manifest["digest"] = canonical_digest(body)
    manifest["timestamp"] = time.time()
    with open(os.path.join(run_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _oracle_from_file(path) -> EncoderOracle:
    """Load an oracle from a weight file or a wrapper descriptor (JSON
    naming the inner encoder file, kind, parameters, seed)."""
    with open(path, "rb") as fh:
        head = fh.read(1)
    if head == b"{":
        with open(path) as fh:
            desc = json.load(fh)
        inner_path = os.path.join(os.path.dirname(path), desc["inner"])
        inner = EncoderOracle(load_encoder(inner_path), tag=desc.get("tag", desc["inner"]))
        if desc["kind"] == "noise":
            return NoisyOracle(inner, desc["eps"], desc["seed"])
        if desc["kind"] == "shuffle":
            return ShuffledOracle(inner, desc["fraction"], desc["seed"])
        raise ConfigError(f"unknown wrapper kind {desc['kind']!r}")
    return EncoderOracle(load_encoder(path), tag=os.path.basename(path))


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, "pretrain")
    data = dataset_from_config(cfg.get("dataset", {}), seed)
    enc_cfg = cfg.get("encoder", {})
    spec = EncoderSpec(enc_cfg.get("arch", "conv-small"), enc_cfg.get("embed_dim", 128),
                       enc_cfg.get("activation", "relu"), enc_cfg.get("width", 1.0))
    ssl = enc_cfg.get("ssl", {})
    encoder = build_encoder(spec, seeds.substream(seed, seeds.INIT),
                            kind=enc_cfg.get("kind", "victim"))
    encoder = pretrain_ssl(encoder, data, SSLConfig(
        epochs=ssl.get("epochs", 30), batch_size=ssl.get("batch_size", 256),
        temperature=ssl.get("temperature", 0.5), lr=ssl.get("lr", 1e-3),
        seed=seeds.substream(seed, "ssl")))
    out = args.out or os.path.join(run_dir, "weights", "encoder.sgw")
    save_encoder(encoder, out)
    curve_path = os.path.join(run_dir, "csv", "ssl_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "contrastive_loss"])
        for i, loss in enumerate(encoder.provenance.get("loss_curve", [])):
            writer.writerow([i, loss])
    write_manifest(run_dir, "pretrain", cfg, seed,
                   inputs={"dataset": data.source},
                   outputs={"encoder": file_digest(out)})
    print(f"encoder written to {out}")
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, "fingerprint")
    victim = load_encoder(args.victim)
    data = dataset_from_config(cfg.get("dataset", {}), seed)
    fp = cfg.get("fingerprint", {})
    train_cfg = TrainConfig(
        alpha=fp.get("alpha", 0.7), secret_len=fp.get("secret_len", 64),
        epochs=fp.get("epochs", 100), batch_size=fp.get("batch_size", 64),
        lr=fp.get("lr", 1e-3), extractor_lr=fp.get("extractor_lr", 3e-3),
        stop_ebr=fp.get("stop_ebr", 0.05),
        warmup_gate=fp.get("warmup_gate", 0.0),
        warmup_max=fp.get("warmup_max", 0),
        ramp_epochs=fp.get("ramp_epochs", 0),
        whiten_eps=fp.get("whiten_eps", 0.05),
        whiten_rank=fp.get("whiten_rank", 0),
        channel_noise=fp.get("channel_noise", 0.0),
        seed=seeds.substream(seed, "fingerprint"), use_fca=fp.get("use_fca", True),
        direction=fp.get("direction", "forward"))
    bundle = train_fingerprint(victim, data, train_cfg)
    out = args.out or os.path.join(run_dir, "bundles", "fingerprint.sgf")
    save_bundle(bundle, out)
    curve_path = os.path.join(run_dir, "csv", "fingerprint_curve.csv")
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss_secret", "loss_image", "total", "ebr"])
        for rec in bundle.curve:
            writer.writerow([rec["epoch"], rec["loss_secret"], rec["loss_image"],
                             rec["total"], rec["ebr"]])
    write_manifest(run_dir, "fingerprint", cfg, seed,
                   inputs={"victim": file_digest(args.victim), "dataset": data.source},
                   outputs={"bundle": file_digest(out)})
    print(f"bundle written to {out} ({len(bundle.curve)} epochs)")
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, f"attack-{args.kind}")
    atk = cfg.get("attack", {})
    out = args.out or os.path.join(run_dir, "weights", f"{args.kind}.sgw")
    attack_seed = seeds.substream(seed, seeds.ATTACK)
    if args.kind == "extract":
        victim = _oracle_from_file(args.encoder)
        data = dataset_from_config(cfg.get("attack_dataset", cfg.get("dataset", {})), seed)
        spec_cfg = atk.get("surrogate", {})
        spec = EncoderSpec(spec_cfg.get("arch", "conv-small"),
                           spec_cfg.get("embed_dim", victim.embed_dim),
                           spec_cfg.get("activation", "relu"), spec_cfg.get("width", 1.0))
        acfg = AttackConfig(kind="extract", epochs=atk.get("epochs", 10),
                            lr=atk.get("lr", 1e-3), seed=attack_seed)
        encoder = extract_model(victim, spec, data, acfg)
        save_encoder(encoder, out)
    elif args.kind in ("ft-same", "ft-other", "ftal", "rtal"):
        encoder = load_encoder(args.encoder)
        data = dataset_from_config(cfg.get("attack_dataset", cfg.get("dataset", {})), seed)
        encoder = finetune(encoder, data, args.kind, atk.get("epochs", 10),
                           seed=attack_seed, lr=atk.get("lr", 1e-4))
        save_encoder(encoder, out)
    elif args.kind == "prune":
        encoder = prune(load_encoder(args.encoder), atk.get("rate", 0.3))
        save_encoder(encoder, out)
    elif args.kind in ("noise", "shuffle"):
        out = args.out or os.path.join(run_dir, "weights", f"{args.kind}.json")
        desc = {"kind": args.kind, "inner": os.path.basename(args.encoder),
                "seed": attack_seed, "tag": f"{args.kind}:{os.path.basename(args.encoder)}"}
        if args.kind == "noise":
            desc["eps"] = atk.get("eps", 0.15)
        else:
            desc["fraction"] = atk.get("fraction", 0.05)
        os.makedirs(os.path.dirname(out), exist_ok=True)
        import shutil
        inner_copy = os.path.join(os.path.dirname(out), os.path.basename(args.encoder))
        if os.path.abspath(inner_copy) != os.path.abspath(args.encoder):
            shutil.copyfile(args.encoder, inner_copy)
        with open(out, "w") as fh:
            json.dump(desc, fh, indent=2)
    else:
        raise ConfigError(f"unknown attack kind {args.kind!r}")
    write_manifest(run_dir, f"attack-{args.kind}", cfg, seed,
                   inputs={"encoder": file_digest(args.encoder)},
                   outputs={"artifact": file_digest(out)})
    print(f"attack artifact written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, "verify")
    bundle = load_bundle(args.bundle)
    vcfg = cfg.get("verify", {})
    n_queries = args.queries or vcfg.get("n_queries", 1000)
    data = dataset_from_config(cfg.get("dataset", {}), seed)
    queries = sample_query_set(data, min(n_queries, len(data)),
                               seeds.substream(seed, "query"))
    panel_oracles = [_oracle_from_file(p) for p in (args.panel or [])]
    threshold = vcfg.get("threshold")
    last_code = EXIT_OK
    outputs = {}
    for suspect_path in args.suspects:
        suspect = _oracle_from_file(suspect_path)
        if threshold is None:
            if not panel_oracles:
                raise ConfigError("no threshold configured and no panel to calibrate from")
            victim_oracle = _oracle_from_file(args.victim) if args.victim else suspect
            threshold = calibrate_threshold(bundle, victim_oracle, panel_oracles,
                                            queries, seed=seeds.substream(seed, "calib"))
        panel_runs = [run_queries(bundle, o, queries, seeds.substream(seed, f"panel{i}"))
                      for i, o in enumerate(panel_oracles)] or None
        report = verify(bundle, suspect, queries, threshold,
                        seed=seeds.substream(seed, "verify"),
                        panel_runs=panel_runs,
                        significance=vcfg.get("significance", 0.05))
        name = os.path.splitext(os.path.basename(suspect_path))[0]
        report_path = os.path.join(run_dir, "reports", f"{name}.json")
        with open(report_path, "w") as fh:
            fh.write(report.to_json())
        outputs[name] = {"ebr": report.ebr, "verdict": report.verdict,
                         "p_value": report.p_value}
        if n_queries < 1000:
            outputs[name]["note"] = f"reduced query budget N={len(queries)}"
        print(f"{name}: ebr={report.ebr:.4f} T={threshold:.3f} verdict={report.verdict}"
              + (f" p={report.p_value:.3g}" if report.p_value is not None else ""))
        last_code = EXIT_PIRACY if report.verdict == "piracy" else EXIT_INDEPENDENT
    write_manifest(run_dir, "verify", cfg, seed,
                   inputs={"bundle": file_digest(args.bundle),
                           "suspects": [file_digest(p) for p in args.suspects]},
                   outputs=outputs)
    return last_code if args.exit_verdict else EXIT_OK


def cmd_explain(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, "explain")
    bundle = load_bundle(args.bundle)
    encoder = load_encoder(args.encoder)
    data = dataset_from_config(cfg.get("dataset", {}), seed)
    queries = sample_query_set(data, min(args.count, len(data)),
                               seeds.substream(seed, "query"))
    rng = np.random.default_rng(seeds.substream(seed, seeds.SECRETS))
    from .data import gen_secret_batch
    bits = gen_secret_batch(len(queries), bundle.secret_len, rng)
    import torch
    with torch.no_grad():
        stego = bundle.embedder(queries.images, bits).clamp(0, 1)
    outputs = {}
    for i in range(len(queries)):
        heat, d = gradcam_stego(encoder, queries.images[i], stego[i], layer=args.layer)
        path = os.path.join(run_dir, "reports", f"heatmap_{i}.pgm")
        write_heatmap_pgm(path, heat, sidecar={
            "objective": d, "layer": args.layer or "last-conv",
            "psnr": psnr(queries.images[i], stego[i]),
            "ssim": ssim(queries.images[i], stego[i])})
        outputs[f"heatmap_{i}"] = file_digest(path)
    write_manifest(run_dir, "explain", cfg, seed,
                   inputs={"bundle": file_digest(args.bundle),
                           "encoder": file_digest(args.encoder)},
                   outputs=outputs)
    print(f"{len(queries)} heat maps written to {run_dir}/reports")
    return EXIT_OK


def _ablate_once(victim, data, queries, fp_cfg: TrainConfig, seed: int):
    """Train a fingerprint and measure (ebr, psnr, ssim) on the victim."""
    import torch
    bundle = train_fingerprint(victim, data, fp_cfg)
    oracle = EncoderOracle(victim, tag="victim")
    run = run_queries(bundle, oracle, queries, seed)
    ebr = compute_ebr(run.embedded, run.extracted)
    rng = np.random.default_rng(seeds.substream(seed, seeds.SECRETS))
    from .data import gen_secret_batch
    bits = gen_secret_batch(len(queries), fp_cfg.secret_len, rng)
    with torch.no_grad():
        stego = bundle.embedder(queries.images, bits).clamp(0, 1)
    return ebr, psnr(queries.images, stego), ssim(queries.images[:4], stego[:4])


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    seed = master_seed(cfg, args)
    run_dir = make_run_dir(cfg, f"ablate-{args.axis}")
    victim = load_encoder(args.victim)
    data = dataset_from_config(cfg.get("dataset", {}), seed)
    fp = cfg.get("fingerprint", {})
    base = dict(alpha=fp.get("alpha", 0.7), secret_len=fp.get("secret_len", 64),
                epochs=fp.get("epochs", 100), batch_size=fp.get("batch_size", 64),
                lr=fp.get("lr", 1e-3), extractor_lr=fp.get("extractor_lr", 3e-3),
                stop_ebr=fp.get("stop_ebr", 0.05),
                warmup_gate=fp.get("warmup_gate", 0.0),
                warmup_max=fp.get("warmup_max", 0),
                ramp_epochs=fp.get("ramp_epochs", 0),
                whiten_eps=fp.get("whiten_eps", 0.05),
                whiten_rank=fp.get("whiten_rank", 0),
                channel_noise=fp.get("channel_noise", 0.0),
                use_fca=fp.get("use_fca", True))
    n_queries = cfg.get("verify", {}).get("n_queries", 1000)
    queries = sample_query_set(data, min(n_queries, len(data)),
                               seeds.substream(seed, "query"))
    rows = []
    if args.axis == "secret-length":
        for length in (16, 32, 64, 128, 256, 512):
            fp_cfg = TrainConfig(**{**base, "secret_len": length},
                                 seed=seeds.substream(seed, f"ablate-L{length}"))
            rows.append((f"L={length}",) + _ablate_once(victim, data, queries, fp_cfg, seed))
    elif args.axis == "train-size":
        for frac in (0.2, 0.5, 1.0):
            sub = sample_query_set(data, max(1, int(frac * len(data))),
                                   seeds.substream(seed, f"sub{frac}"))
            fp_cfg = TrainConfig(**base, seed=seeds.substream(seed, f"ablate-n{frac}"))
            rows.append((f"frac={frac}",) + _ablate_once(victim, sub, queries, fp_cfg, seed))
    elif args.axis == "query-count":
        fp_cfg = TrainConfig(**base, seed=seeds.substream(seed, "ablate-q"))
        bundle = train_fingerprint(victim, data, fp_cfg)
        oracle = EncoderOracle(victim, tag="victim")
        for n in (100, 250, 500, 1000):
            qs = sample_query_set(data, min(n, len(data)), seeds.substream(seed, f"q{n}"))
            run = run_queries(bundle, oracle, qs, seed)
            rows.append((f"N={n}", compute_ebr(run.embedded, run.extracted), "", ""))
    elif args.axis == "fcaemb":
        for use_fca in (True, False):
            fp_cfg = TrainConfig(**{**base, "use_fca": use_fca},
                                 seed=seeds.substream(seed, "ablate-fca"))
            label = "with-fca" if use_fca else "without-fca"
            rows.append((label,) + _ablate_once(victim, data, queries, fp_cfg, seed))
    elif args.axis == "dataset":
        for i in range(3):
            alt = synth_dataset(seeds.substream(seed, f"ds{i}"), len(data),
                                data.images.shape[-1])
            fp_cfg = TrainConfig(**base, seed=seeds.substream(seed, f"ablate-d{i}"))
            rows.append((f"dataset-{i}",) + _ablate_once(victim, alt, queries, fp_cfg, seed))
    else:
        raise ConfigError(f"unknown ablation axis {args.axis!r}")
    csv_path = os.path.join(run_dir, "csv", f"ablate_{args.axis}.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["setting", "ebr", "psnr", "ssim"])
        writer.writerows(rows)
    write_manifest(run_dir, f"ablate-{args.axis}", cfg, seed,
                   inputs={"victim": file_digest(args.victim)},
                   outputs={"csv": file_digest(csv_path)})
    print(f"sweep written to {csv_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("pretrain", help="contrastively pre-train an encoder")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("fingerprint", help="learn an embedder/extractor fingerprint")
    common(p)
    p.add_argument("--victim", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("attack", help="derive a piracy encoder or oracle wrapper")
    common(p)
    p.add_argument("kind", choices=["extract", "ft-same", "ft-other", "ftal", "rtal",
                                    "prune", "noise", "shuffle"])
    p.add_argument("--encoder", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="verify suspect encoders against a fingerprint")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--victim")
    p.add_argument("--panel", nargs="*")
    p.add_argument("--queries", type=int)
    p.add_argument("--exit-verdict", action="store_true")
    p.add_argument("suspects", nargs="+")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("explain", help="emit embedding-distance heat maps")
    common(p)
    p.add_argument("--bundle", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--layer")
    p.add_argument("--count", type=int, default=4)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="run a configuration sweep")
    common(p)
    p.add_argument("--axis", required=True,
                   choices=["secret-length", "train-size", "dataset", "query-count", "fcaemb"])
    p.add_argument("--victim", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CalibrationError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (IncompatibleOracleError, CorruptionError, VersionError) as exc:
        print(f"incompatibility: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except StegoFPError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
