"""Experiment runner CLI.

Every subcommand emits JSON (stdout or --out); every report embeds the
config hash, seed, and package version so runs are traceable.
"""

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field

import click
import numpy as np

from . import __version__
from . import alignment as A
from . import corpus as C
from . import encoders as E
from . import evaluation as V
from . import negatives as N
from . import synthetic as S

VERSION_STRING = f"ctxground-{__version__}"


@dataclass
class ExperimentConfig:
    corpus: str = ""
    scenes: str = ""
    synonyms: str = ""
    base_names: str = ""
    categories: str = ""
    out_dir: str = "runs"
    mode: str = E.CONTEXTUALIZED
    negatives_mode: str = None
    freeze_language: bool = False
    freeze_v2l: bool = False
    use_prompt: bool = True
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.05
    seed: int = 0
    d: int = 32
    d_v: int = 16
    d_r: int = 32
    layers: int = 2
    normalize_sim: bool = False
    th_sim: float = None   # None: pick from the model (suggest_th_sim)
    t: int = 30
    ks: tuple = (1, 5, 10, 50)

    def validate_paths(self):
        for name in ("corpus", "scenes", "synonyms", "base_names"):
            path = getattr(self, name)
            if not path or not os.path.exists(path):
                raise click.ClickException(
                    f"config error: {name} path {path!r} does not exist"
                )

    def train_config(self):
        return A.TrainConfig(
            mode=self.mode, negatives_mode=self.negatives_mode,
            freeze_language=self.freeze_language, freeze_v2l=self.freeze_v2l,
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            seed=self.seed, d=self.d, d_v=self.d_v, d_r=self.d_r,
            layers=self.layers, normalize_sim=self.normalize_sim,
        )


def config_hash(cfg):
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def stamp(payload, cfg):
    payload["config_hash"] = config_hash(cfg)
    payload["seed"] = cfg.seed
    payload["version"] = VERSION_STRING
    return payload


def emit(payload, out=None):
    text = json.dumps(payload, indent=1, default=_json_default)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x)}")


def load_inputs(cfg, need_scenes=True):
    cfg.validate_paths()
    corpus = C.load_corpus(cfg.corpus)
    with open(cfg.base_names, encoding="utf-8") as fh:
        base = set(json.load(fh))
    vocab = C.build_vocabulary(cfg.synonyms, base)
    stats = C.compute_adj_noun_stats(corpus, vocab)
    scenes = E.load_scenes(cfg.scenes) if need_scenes else None
    return corpus, scenes, vocab, stats


def _config_from_file_and_flags(config_file, overrides):
    cfg = ExperimentConfig()
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            data = json.load(fh)
        for k, v in data.items():
            if not hasattr(cfg, k):
                raise click.ClickException(f"unknown config key {k!r}")
            setattr(cfg, k, tuple(v) if k == "ks" else v)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg


def common_options(fn):
    opts = [
        click.option("--config", "config_file", type=click.Path(exists=True),
                     default=None, help="JSON config; flags override it."),
        click.option("--corpus", default=None),
        click.option("--scenes", default=None),
        click.option("--synonyms", default=None),
        click.option("--base-names", "base_names", default=None),
        click.option("--mode", type=click.Choice(E.MODES), default=None),
        click.option("--seed", type=int, default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


@click.group()
@click.version_option(__version__)
def main():
    """Context-enhanced region-word grounding experiments."""


@main.command("build-vocab")
@click.option("--synonyms", required=True, type=click.Path(exists=True))
@click.option("--base-names", "base_names", required=True,
              type=click.Path(exists=True))
@click.option("--out", default=None)
def build_vocab_cmd(synonyms, base_names, out):
    """Build the object vocabulary and dump its term index."""
    with open(base_names, encoding="utf-8") as fh:
        base = set(json.load(fh))
    vocab = C.build_vocabulary(synonyms, base)
    emit({
        "classes": [
            {"name": c.name, "synonyms": sorted(c.synonyms),
             "is_base": c.is_base}
            for c in vocab.classes
        ],
        "term_index": dict(sorted(vocab.term_index.items())),
    }, out)


@main.command("extract-context")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--synonyms", required=True, type=click.Path(exists=True))
@click.option("--base-names", "base_names", required=True,
              type=click.Path(exists=True))
@click.option("--kind", type=click.Choice(["adj", "pp", "vp"]), required=True)
@click.option("--out", required=True)
def extract_context_cmd(corpus, synonyms, base_names, kind, out):
    """Write a corpus copy with one context component removed."""
    with open(base_names, encoding="utf-8") as fh:
        base = set(json.load(fh))
    vocab = C.build_vocabulary(synonyms, base)
    caps = C.load_corpus(corpus)
    removed = [C.remove_context(c, kind.upper(), vocab) for c in caps]
    C.save_corpus(removed, out)
    click.echo(json.dumps({"written": out, "captions": len(removed)}))


@main.command("gen-negatives")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--synonyms", required=True, type=click.Path(exists=True))
@click.option("--base-names", "base_names", required=True,
              type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(N.MODES), default="adj+noun")
@click.option("--seed", type=int, default=0)
@click.option("--out", default=None)
def gen_negatives_cmd(corpus, synonyms, base_names, mode, seed, out):
    """Emit negative caption samples as JSON-lines."""
    with open(base_names, encoding="utf-8") as fh:
        base = set(json.load(fh))
    vocab = C.build_vocabulary(synonyms, base)
    caps = C.load_corpus(corpus)
    stats = C.compute_adj_noun_stats(caps, vocab)
    negs = N.build_negative_batch(caps, mode, stats, vocab, seed)
    lines = "\n".join(json.dumps(N.negative_to_dict(n)) for n in negs)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(lines + ("\n" if lines else ""))
    else:
        click.echo(lines)


@main.command("gen-synthetic")
@click.option("--n-classes", type=int, default=8)
@click.option("--n-attributes", type=int, default=4)
@click.option("--n-scenes", type=int, default=200)
@click.option("--grid", type=(int, int), default=(6, 6))
@click.option("--d-v", type=int, default=16)
@click.option("--noise-sigma", type=float, default=0.1)
@click.option("--attribute-effect", type=float, default=0.7)
@click.option("--seed", type=int, default=0)
@click.option("--out-dir", required=True)
def gen_synthetic_cmd(n_classes, n_attributes, n_scenes, grid, d_v,
                      noise_sigma, attribute_effect, seed, out_dir):
    """Generate planted synthetic scenes + captions."""
    spec = S.SyntheticSpec(
        n_classes=n_classes, n_attributes=n_attributes, n_scenes=n_scenes,
        grid_h=grid[0], grid_w=grid[1], d_v=d_v, noise_sigma=noise_sigma,
        attribute_effect=attribute_effect,
    )
    result = S.generate_synthetic(spec, seed, out_dir)
    click.echo(json.dumps({
        "scenes": result["scenes_path"],
        "corpus": result["corpus_path"],
        "synonyms": result["synonyms_path"],
        "base_names": result["base_names_path"],
        "n_scenes": len(result["scenes"]),
    }))


@main.command("train")
@common_options
@click.option("--negatives", "negatives_mode",
              type=click.Choice(N.MODES), default=None)
@click.option("--freeze-language/--no-freeze-language", default=None)
@click.option("--freeze-v2l/--no-freeze-v2l", default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch", "batch_size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--out-checkpoint", required=True)
@click.option("--log", "log_path", default=None)
def train_cmd(config_file, out_checkpoint, log_path, **overrides):
    """Pretrain and write a checkpoint (plus optional CSV training log)."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    corpus, scenes, vocab, stats = load_inputs(cfg)
    enc, log = A.pretrain(corpus, scenes, cfg.train_config(),
                          stats=stats, vocab=vocab, log_path=log_path)
    E.save_checkpoint(enc, out_checkpoint)
    payload = stamp({
        "checkpoint": out_checkpoint,
        "steps": cfg.steps,
        "final_loss": log[-1]["loss_total"] if log else None,
    }, cfg)
    click.echo(json.dumps(payload))


def _resolve_th_sim(cfg, corpus, scenes, enc, vocab):
    if cfg.th_sim is not None:
        return cfg.th_sim
    return V.suggest_th_sim(corpus, scenes, enc, vocab, cfg.mode)


@main.command("eval-grounding")
@common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--t", type=int, default=None)
@click.option("--th-sim", "th_sim", type=float, required=True,
              help="Similarity threshold (paper value: 10).")
@click.option("--out", default=None)
def eval_grounding_cmd(config_file, checkpoint, out, **overrides):
    """Unsupervised phrase grounding AP@t report."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    corpus, scenes, vocab, stats = load_inputs(cfg)
    enc = E.load_checkpoint(checkpoint)
    report = V.phrase_grounding_ap(
        corpus, scenes, enc, vocab, mode=cfg.mode, t=cfg.t,
        th_sim=cfg.th_sim, stats=stats, rng_seed=cfg.seed,
    )
    emit(stamp(report, cfg), out)


@main.command("eval-retrieval")
@common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--ks", default="1,5,10,50")
@click.option("--out", default=None)
def eval_retrieval_cmd(config_file, checkpoint, ks, out, **overrides):
    """Text-to-region retrieval P@k / R@k report."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    cfg.ks = tuple(int(k) for k in ks.split(","))
    corpus, scenes, vocab, stats = load_inputs(cfg)
    enc = E.load_checkpoint(checkpoint)
    gallery = V.build_region_gallery(scenes, enc, cfg.mode)
    pairs = sorted({(attr, cls) for _, attr, cls in gallery if attr})
    queries = V.build_retrieval_queries(pairs, enc, cfg.mode)
    report = V.retrieval_eval(queries, gallery, cfg.ks)
    emit(stamp(report, cfg), out)


@main.command("probe-attributes")
@common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--t", type=int, default=None)
@click.option("--th-sim", "th_sim", type=float, default=None,
              help="Similarity threshold; defaults to a model-derived one.")
@click.option("--out", default=None)
def probe_attributes_cmd(config_file, checkpoint, out, **overrides):
    """AP@t under the four adjective-modification scenarios."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    corpus, scenes, vocab, stats = load_inputs(cfg)
    enc = E.load_checkpoint(checkpoint)
    th = _resolve_th_sim(cfg, corpus, scenes, enc, vocab)
    report = V.attribute_probe(
        corpus, scenes, enc, vocab, stats, t=cfg.t, th_sim=th,
        mode=cfg.mode, seed=cfg.seed,
    )
    report["th_sim"] = th
    emit(stamp(report, cfg), out)


@main.command("classify")
@common_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--classes", "class_set",
              type=click.Choice(["base", "target", "union"]), default="union")
@click.option("--use-prompt/--no-prompt", default=True)
@click.option("--probe/--no-probe", "use_probe", default=False,
              help="Fit a linear probe on base-class cells first.")
@click.option("--out", default=None)
def classify_cmd(config_file, checkpoint, class_set, use_prompt, use_probe,
                 out, **overrides):
    """Open-vocabulary region classification report."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    corpus, scenes, vocab, stats = load_inputs(cfg)
    enc = E.load_checkpoint(checkpoint)
    probe = None
    if use_probe:
        names = {"base": vocab.base_names(), "target": vocab.target_names(),
                 "union": vocab.base_names() + vocab.target_names()}[class_set]
        probe = V.fit_linear_probe(scenes, enc, names, cfg.mode,
                                   seed=cfg.seed)
    report = V.classify_regions(
        scenes, enc, vocab, class_set=class_set.upper(), mode=cfg.mode,
        use_prompt=use_prompt, probe=probe,
    )
    emit(stamp(report, cfg), out)


def run_experiment(cfg):
    """Full pipeline: stats -> negatives -> pretrain -> all evaluations.

    Writes everything into a timestamped directory under cfg.out_dir and
    returns its path. A stage failure aborts with the stage name; partial
    outputs are kept.
    """
    run_dir = os.path.join(
        cfg.out_dir, time.strftime("%Y%m%d-%H%M%S") + f"-seed{cfg.seed}"
    )
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=1, default=str)

    stage = "load"
    try:
        corpus, scenes, vocab, stats = load_inputs(cfg)
        stage = "pretrain"
        enc, log = A.pretrain(
            corpus, scenes, cfg.train_config(), stats=stats, vocab=vocab,
            log_path=os.path.join(run_dir, "training_log.csv"),
        )
        E.save_checkpoint(enc, os.path.join(run_dir, "checkpoint.json"))
        stage = "eval-grounding"
        th = _resolve_th_sim(cfg, corpus, scenes, enc, vocab)
        grounding = V.phrase_grounding_ap(
            corpus, scenes, enc, vocab, mode=cfg.mode, t=cfg.t, th_sim=th,
            stats=stats, rng_seed=cfg.seed,
        )
        grounding["th_sim"] = th
        emit(stamp(grounding, cfg), os.path.join(run_dir, "grounding.json"))
        stage = "eval-retrieval"
        gallery = V.build_region_gallery(scenes, enc, cfg.mode)
        pairs = sorted({(attr, cls) for _, attr, cls in gallery if attr})
        if pairs:
            retrieval = V.retrieval_eval(
                V.build_retrieval_queries(pairs, enc, cfg.mode), gallery,
                cfg.ks,
            )
            emit(stamp(retrieval, cfg),
                 os.path.join(run_dir, "retrieval.json"))
        stage = "probe-attributes"
        probe = V.attribute_probe(
            corpus, scenes, enc, vocab, stats, t=cfg.t, th_sim=th,
            mode=cfg.mode, seed=cfg.seed,
        )
        probe["th_sim"] = th
        emit(stamp(probe, cfg), os.path.join(run_dir, "probe.json"))
        stage = "classify"
        classify = V.classify_regions(
            scenes, enc, vocab, class_set=V.UNION, mode=cfg.mode,
            use_prompt=cfg.use_prompt,
        )
        emit(stamp(classify, cfg), os.path.join(run_dir, "classify.json"))
    except Exception as exc:
        raise click.ClickException(
            f"stage {stage!r} failed: {exc} (partial outputs in {run_dir})"
        ) from exc
    return run_dir


@main.command("run")
@common_options
@click.option("--negatives", "negatives_mode",
              type=click.Choice(N.MODES), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch", "batch_size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--th-sim", "th_sim", type=float, default=None)
@click.option("--out-dir", "out_dir", default=None)
def run_cmd(config_file, **overrides):
    """Run the full experiment pipeline into a timestamped directory."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    run_dir = run_experiment(cfg)
    click.echo(json.dumps({"run_dir": run_dir}))


def ablate_context(cfg, kinds, n_seeds=3):
    """Baseline vs context-removed pretraining, both grounding modes.

    For each removal kind, pretrains on the corpus with that component
    removed and reports classification / grounding deltas against the
    unmodified-corpus baseline, meaned over ``n_seeds`` seeds.
    """
    corpus, scenes, vocab, stats = load_inputs(cfg)
    kinds = [k.upper() for k in kinds]
    report = {"kinds": kinds, "modes": {}, "n_seeds": n_seeds}
    for mode in E.MODES:
        rows = {}
        variants = {"baseline": corpus}
        for kind in kinds:
            variants[kind] = [C.remove_context(c, kind, vocab)
                              for c in corpus]
        for name, variant in variants.items():
            accs, aps = [], []
            v_stats = C.compute_adj_noun_stats(variant, vocab)
            for s in range(n_seeds):
                tc = cfg.train_config()
                tc.mode = mode
                tc.seed = cfg.seed + s
                enc, _ = A.pretrain(variant, scenes, tc, stats=v_stats,
                                    vocab=vocab)
                acc = V.classify_regions(
                    scenes, enc, vocab, class_set=V.UNION, mode=mode,
                    use_prompt=cfg.use_prompt,
                )["mean_accuracy"]
                th = _resolve_th_sim(cfg, variant, scenes, enc, vocab) \
                    if cfg.th_sim is None else cfg.th_sim
                ap = V.phrase_grounding_ap(
                    variant, scenes, enc, vocab, mode=mode, t=cfg.t,
                    th_sim=th, stats=v_stats, rng_seed=tc.seed,
                )["mean_ap"]
                accs.append(acc or 0.0)
                aps.append(ap)
            rows[name] = {"mean_accuracy": float(np.mean(accs)),
                          "mean_ap": float(np.mean(aps))}
        for kind in kinds:
            rows[kind]["delta_accuracy"] = (
                rows[kind]["mean_accuracy"] - rows["baseline"]["mean_accuracy"]
            )
            rows[kind]["delta_ap"] = (
                rows[kind]["mean_ap"] - rows["baseline"]["mean_ap"]
            )
        report["modes"][mode] = rows
    return report


@main.command("ablate-context")
@common_options
@click.option("--kinds", default="adj,pp,vp",
              help="Comma list from {adj,pp,vp}; empty = baseline only.")
@click.option("--negatives", "negatives_mode",
              type=click.Choice(N.MODES), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--batch", "batch_size", type=int, default=None)
@click.option("--n-seeds", type=int, default=3)
@click.option("--out", default=None)
def ablate_context_cmd(config_file, kinds, n_seeds, out, **overrides):
    """Context-removal ablation over both grounding modes."""
    cfg = _config_from_file_and_flags(config_file, overrides)
    kind_list = [k for k in kinds.split(",") if k]
    report = ablate_context(cfg, kind_list, n_seeds=n_seeds)
    emit(stamp(report, cfg), out)


if __name__ == "__main__":
    main()
