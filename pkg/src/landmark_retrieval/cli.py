"""Batch command line: generate, clean, train, extract, eval, ensemble.

Exit codes: 0 ok, 2 config, 3 data format / io, 4 training state,
5 evaluation.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ablation
from .cleaner import clean_dataset
from .config import PipelineConfig, derive_seed, dump_config, load_config
from .core import LabeledEmbedding, stack_vectors
from .cutmix import make_mixed_sample
from .eval import build_index, ensemble_evaluate, evaluate
from .exceptions import ConfigError, FormatError, IoError, LandmarkError, MissingCheckpointError
from .extractor import ToyExtractor, as_labeled, generate_pixel_world, generate_synthetic_dataset, mixed_views
from .head import Checkpoint, MetricLearningHead, format_trace, head_forward, load_checkpoint, save_checkpoint
from .io import read_embeddings, read_pnm, write_embeddings, write_manifest, write_pnm


def _config(args) -> PipelineConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        # one top-level seed drives every stage
        overrides = {
            "seed": args.seed,
            "world.seed": derive_seed(args.seed, "world"),
            "train.seed": derive_seed(args.seed, "train"),
        }
    for dotted, attr in (
        ("eval.k", "k"),
        ("dbscan.eps", "eps"),
        ("dbscan.relaxed_eps", "relaxed_eps"),
        ("dbscan.min_pts", "min_pts"),
        ("dbscan.min_cluster_size", "min_cluster_size"),
        ("world.kind", "kind"),
    ):
        if getattr(args, attr, None) is not None:
            overrides[dotted] = getattr(args, attr)
    return load_config(args.config, overrides)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out_dir)
    w = cfg.world
    if w.kind == "embedding":
        ds = generate_synthetic_dataset(w)
        train, gallery, queries = ds
        records = ds.manifest_records()
        mix = None
    else:
        pw = generate_pixel_world(w, cfg.cutmix)
        ex = ToyExtractor()
        train = as_labeled(ex.transform(pw.train_images), pw.train_labels, "t")
        gallery = as_labeled(ex.transform(pw.gallery_images), pw.gallery_labels, "g")
        queries = as_labeled(ex.transform(pw.query_images), pw.query_labels, "q")
        frac = (cfg.cutmix.fraction_lo, cfg.cutmix.fraction_hi)
        feats, partner_labels, partners = mixed_views(
            pw.train_images, pw.train_labels, 1, frac, derive_seed(cfg.seed, "mix"), ex
        )
        mix = [
            LabeledEmbedding(f"{train[i].id}+{train[j].id}", int(lb), f)
            for i, (f, lb, j) in enumerate(zip(feats[0], partner_labels[0], partners[0]))
        ]
        records = [
            {"id": r.id, "label": r.label, "split": split}
            for split, rows in (("train", train), ("gallery", gallery), ("query", queries))
            for r in rows
        ]
    write_embeddings(out / "train.emb", train)
    write_embeddings(out / "gallery.emb", gallery)
    write_embeddings(out / "queries.emb", queries)
    if mix is not None:
        write_embeddings(out / "train_mix.emb", mix)
    write_manifest(out / "manifest.jsonl", records)
    (out / "config.yaml").write_text(dump_config(cfg))
    print(f"seed={cfg.seed} world_seed={w.seed} kind={w.kind} train={len(train)} gallery={len(gallery)} queries={len(queries)}")
    return 0


def cmd_clean(args) -> int:
    cfg = _config(args)
    rows = read_embeddings(args.input)
    cleaned, report = clean_dataset(rows, cfg.dbscan, n_jobs=args.jobs)
    write_embeddings(args.out, cleaned)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_augment_preview(args) -> int:
    cfg = _config(args)
    out = _out_dir(args.out_dir)
    frac = (cfg.cutmix.fraction_lo, cfg.cutmix.fraction_hi)
    if args.image_a or args.image_b:
        if not (args.image_a and args.image_b):
            raise FormatError("--image-a and --image-b go together")
        pairs = [((read_pnm(args.image_a), 0), (read_pnm(args.image_b), 1))]
    else:
        pw = generate_pixel_world(cfg.world.model_copy(update={"kind": "pixel"}), cfg.cutmix)
        rng = np.random.default_rng(derive_seed(cfg.seed, "preview"))
        n = len(pw.train_labels)
        pairs = []
        for _ in range(args.count):
            i, j = rng.choice(n, size=2, replace=False)
            pairs.append(((pw.train_images[i], pw.train_labels[i]), (pw.train_images[j], pw.train_labels[j])))
    for k, (a, b) in enumerate(pairs):
        s = make_mixed_sample(a, b, frac, derive_seed(cfg.seed, f"preview-{k}"))
        write_pnm(out / f"before_a_{k:03d}.ppm", a[0])
        write_pnm(out / f"before_b_{k:03d}.ppm", b[0])
        write_pnm(out / f"after_{k:03d}.ppm", s.mixed)
        print(
            f"pair={k} label_a={s.label_a} label_b={s.label_b} corner={s.corner.name} "
            f"fraction={s.fraction!r} weight={s.weight}"
        )
    return 0


def _features(rows: List[LabeledEmbedding]):
    return stack_vectors(rows), np.array([r.label for r in rows], dtype=np.int64)


def _mixed_stream(rows: List[LabeledEmbedding], mix_path):
    """Align ``pasted+partner`` rows with ``rows``; partner labels follow ``rows``.

    Rows whose partner is not in ``rows`` (dropped by cleaning) are skipped.
    """
    label_of = {r.id: r.label for r in rows}
    by_pasted = {}
    for m in read_embeddings(mix_path):
        pasted, sep, partner = m.id.partition("+")
        if not sep:
            raise FormatError(f"mixed row id {m.id!r} is not of the form pasted+partner")
        by_pasted[pasted] = (partner, m.vector)
    kept, mix_x, mix_y = [], [], []
    for r in rows:
        if r.id not in by_pasted:
            raise FormatError(f"no mixed row for training id {r.id!r}")
        partner, vec = by_pasted[r.id]
        if partner not in label_of:
            continue
        kept.append(r)
        mix_x.append(vec)
        mix_y.append(label_of[partner])
    return kept, np.array(mix_x), np.array(mix_y, dtype=np.int64)


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage == 2 and not args.checkpoint:
        raise MissingCheckpointError("stage 2 needs --checkpoint from a stage-1 run")
    use_mix = (args.cutmix or cfg.train.cutmix) and args.stage == 2
    if use_mix and not args.mix:
        raise ConfigError("--cutmix needs the mixed stream via --mix")
    rows = sorted(read_embeddings(args.data), key=lambda r: r.id)
    model = MetricLearningHead.from_config(cfg.train, cfg.arcface)
    if args.stage == 1:
        X, y = _features(rows)
        model.fit(X, y)
    else:
        ckpt = load_checkpoint(args.checkpoint)
        model.head_ = ckpt.head
        model.classifier_ = ckpt.classifier
        model.classes_ = ckpt.classes
        model.trace_ = []
        model.loss_kind_ = "softmax" if ckpt.stage == 1 else "arcface"
        model.n_features_in_ = ckpt.head.in_dim
        X_mix = y_mix = None
        if use_mix:
            n_before = len(rows)
            rows, X_mix, y_mix = _mixed_stream(rows, args.mix)
            if len(rows) < n_before:
                print(f"skipped={n_before - len(rows)} rows whose mix partner is absent")
        X, y = _features(rows)
        model.finetune(X, y, X_mix, y_mix)
    save_checkpoint(args.out, Checkpoint(model.head_, model.classifier_, model.classes_, args.stage, cfg.arcface))
    trace_text = format_trace(model.trace_, with_mix=use_mix)
    if args.trace:
        Path(args.trace).write_text(trace_text)
    first, last = model.trace_[0].total, model.trace_[-1].total
    print(f"stage={args.stage} steps={len(model.trace_)} loss_first={first!r} loss_last={last!r}")
    return 0


def cmd_extract(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    rows = read_embeddings(args.input)
    if rows:
        E = head_forward(stack_vectors(rows), ckpt.head, "eval")
        rows = [LabeledEmbedding(r.id, r.label, e) for r, e in zip(rows, E)]
    write_embeddings(args.out, rows)
    print(f"extracted={len(rows)} dim={ckpt.head.dim}")
    return 0


def _emit(summary, out) -> None:
    if out:
        Path(out).write_text(summary.to_text())
    print(summary.result_line())


def cmd_eval(args) -> int:
    cfg = _config(args)
    summary = evaluate(build_index(read_embeddings(args.gallery)), read_embeddings(args.queries), cfg.eval.k)
    _emit(summary, args.out)
    return 0


def cmd_ensemble(args) -> int:
    cfg = _config(args)
    k = cfg.eval.k
    ga, gb = build_index(read_embeddings(args.gallery_a)), build_index(read_embeddings(args.gallery_b))
    qa, qb = read_embeddings(args.queries_a), read_embeddings(args.queries_b)
    fused = ensemble_evaluate(ga, gb, qa, qb, k)
    print(f"model=a map@{k}={evaluate(ga, qa, k).mean_ap!r}")
    print(f"model=b map@{k}={evaluate(gb, qb, k).mean_ap!r}")
    _emit(fused, args.out)
    return 0


def cmd_report(args) -> int:
    """Paired synthetic experiments, one line per seed."""
    for seed in args.seeds:
        if "cleaning" in args.what:
            r, rep = ablation.cleaning_ablation(seed)
            print(
                f"cleaning seed={seed} noisy={r.baseline:.4f} cleaned={r.treated:.4f} "
                f"gain={r.gain:+.4f} categories={len(rep.categories)}->{rep.new_category_count}"
            )
        if "cutmix" in args.what:
            r = ablation.cutmix_ablation(seed)
            print(f"cutmix seed={seed} plain={r.baseline:.4f} cutmix={r.treated:.4f} gain={r.gain:+.4f}")
        if "ensemble" in args.what:
            e = ablation.ensemble_instance(seed)
            print(f"ensemble seed={seed} a={e.map_a:.4f} b={e.map_b:.4f} fused={e.fused:.4f}")
        if "two-stage" in args.what:
            t = ablation.two_stage_toy(seed)
            print(
                f"two-stage seed={seed} stage1_acc={t.stage1_accuracy:.4f} "
                f"intra1={t.stage1_intra:.5f} intra2={t.stage2_intra:.5f}"
            )
    return 0


REPORTS = ("cleaning", "cutmix", "ensemble", "two-stage")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmark-retrieval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML pipeline config")
        p.add_argument("--seed", type=int, help="top-level seed; derives world and training seeds")
        p.set_defaults(func=func)
        return p

    p = command("generate", cmd_generate, "write a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--kind", choices=("embedding", "pixel"))

    p = command("clean", cmd_clean, "relabel a training set by clustering")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--eps", type=float)
    p.add_argument("--relaxed-eps", type=float)
    p.add_argument("--min-pts", type=int)
    p.add_argument("--min-cluster-size", type=int)
    p.add_argument("--jobs", type=int, default=None)

    p = command("augment-preview", cmd_augment_preview, "write before/after cutmix images")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--image-a")
    p.add_argument("--image-b")

    p = command("train", cmd_train, "train the head (stage 1 softmax, stage 2 ArcFace)")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--trace")
    p.add_argument("--cutmix", action="store_true")
    p.add_argument("--mix")

    p = command("extract", cmd_extract, "apply a trained head to features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = command("eval", cmd_eval, "mAP@k of queries against a gallery")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = command("ensemble", cmd_ensemble, "evaluate two models and their fusion")
    for name in ("gallery-a", "gallery-b", "queries-a", "queries-b"):
        p.add_argument(f"--{name}", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out")

    p = command("report", cmd_report, "run the paired synthetic experiments")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--what", nargs="+", choices=REPORTS, default=list(REPORTS))
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            return args.func(args)
        except OSError as exc:
            raise IoError(str(exc)) from exc
    except LandmarkError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
