"""Command-line entry point.

Subcommands: gen-data, pretrain (captioner|classifier|damsm), train, eval,
generate. All outputs land under one output directory (flag --out, else
$STORYVIS_OUT/<config out_dir>, else ./<config out_dir>), laid out as
data/, snapshots/, train/, eval/, generate/.
"""

import argparse
import json
import os
import sys

import numpy as np
import torch
import yaml

from .captioner import (greedy_token_accuracy, load_captioner,
                        pretrain_captioner, save_captioner)
from .config import ConfigError, config_hash, load_run_config
from .data.dataset import dataset_checksum, load_pororo_sv, save_pororo_sv
from .data.shapes import generate_all_splits
from .evaluation.classifier import (evaluate_on_dataset, load_classifier,
                                    save_classifier, train_char_classifier)
from .evaluation.damsm import load_damsm, save_damsm, train_h_damsm
from .evaluation.report import full_report
from .training import Trainer, load_generator
from .utils import save_image_grid, story_batch, tensor_to_frames


def _common_flags(sub):
    sub.add_argument("--config", help="YAML run config file")
    sub.add_argument("--preset", choices=["desk", "paper"],
                     help="base preset (wins over the config file's)")
    sub.add_argument("--seed", type=int, help="run seed (wins over config)")
    sub.add_argument("--out", help="output directory (default: "
                     "$STORYVIS_OUT/<config out_dir>)")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="dotted config override, e.g. --set train.epochs=2")


def build_parser():
    p = argparse.ArgumentParser(
        prog="storyvis",
        description="Train and evaluate a story-visualization GAN on the "
                    "synthetic ShapeStories dataset.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _common_flags(s)

    s = sub.add_parser("pretrain", help="train and freeze one metric model")
    s.add_argument("which", choices=["captioner", "classifier", "damsm"])
    _common_flags(s)

    s = sub.add_parser("train", help="adversarial training")
    s.add_argument("--max-steps", type=int, help="stop after this many steps")
    s.add_argument("--resume", help="checkpoint to resume from")
    _common_flags(s)

    s = sub.add_parser("eval", help="compute the full metric report")
    s.add_argument("--checkpoint", help="training checkpoint "
                   "(default: <out>/train/checkpoint_final.pt)")
    s.add_argument("--split", default="val", choices=["train", "val", "test"])
    _common_flags(s)

    s = sub.add_parser("generate", help="render stories to image grids")
    s.add_argument("--checkpoint", help="training checkpoint "
                   "(default: <out>/train/checkpoint_final.pt)")
    s.add_argument("--captions", help="JSON file: list of stories, each a "
                   "list of caption strings")
    s.add_argument("--split", default="val", choices=["train", "val", "test"])
    s.add_argument("--num-stories", type=int, default=4,
                   help="how many split stories to render when no --captions")
    _common_flags(s)
    return p


def _build_config(args):
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = yaml.safe_load(value)
    cfg = load_run_config(args.config, overrides, preset=args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(cfg, args):
    if args.out:
        return args.out
    return os.path.join(os.environ.get("STORYVIS_OUT", "."), cfg.out_dir)


def _paths(out):
    return {name: os.path.join(out, name)
            for name in ("data", "snapshots", "train", "eval", "generate")}


def _load_split(cfg, paths, split):
    try:
        return load_pororo_sv(paths["data"], split,
                              image_size=cfg.data.image_size,
                              max_tokens=cfg.model.max_tokens)
    except ConfigError as e:
        raise ConfigError(f"{e}; run `storyvis gen-data` first")


def _snapshot(paths, name):
    return os.path.join(paths["snapshots"], f"{name}.pt")


def _need_snapshot(paths, name):
    path = _snapshot(paths, name)
    if not os.path.exists(path):
        raise ConfigError(
            f"missing {name} snapshot; run `storyvis pretrain {name}` first")
    return path


# -- commands ------------------------------------------------------------

def cmd_gen_data(cfg, paths, args):
    splits = generate_all_splits(cfg.data, cfg.seed)
    save_pororo_sv(paths["data"], splits.values())
    checksums = {split: dataset_checksum(ds) for split, ds in splits.items()}
    with open(os.path.join(paths["data"], "checksums.json"), "w") as f:
        json.dump(checksums, f, indent=2)
    for split, ds in splits.items():
        print(f"{split}: {len(ds.stories)} stories, checksum {checksums[split]}")
    return 0


def cmd_pretrain(cfg, paths, args):
    os.makedirs(paths["snapshots"], exist_ok=True)
    train_ds = _load_split(cfg, paths, "train")
    val_ds = _load_split(cfg, paths, "val")
    torch.manual_seed(cfg.seed)
    if args.which == "captioner":
        cap = pretrain_captioner(train_ds, val_ds, cfg.model, cfg.pretrain,
                                 seed=cfg.seed, log=print)
        acc = greedy_token_accuracy(cap, val_ds, limit=64)
        save_captioner(_snapshot(paths, "captioner"), cap, cfg.model,
                       train_ds.vocab)
        print(f"captioner frozen; val greedy token accuracy {acc:.2f}%")
    elif args.which == "classifier":
        clf = train_char_classifier(
            train_ds, val_ds, cfg.pretrain, cfg.data.image_size,
            cfg.model.num_chars, seed=cfg.seed, log=print)
        f1, em, _ = evaluate_on_dataset(clf, val_ds,
                                        cfg.eval.classifier_threshold)
        save_classifier(_snapshot(paths, "classifier"), clf,
                        cfg.data.image_size, cfg.model.num_chars)
        print(f"classifier frozen; val micro-F1 {f1:.2f} exact-match {em:.2f}")
    else:
        matcher = train_h_damsm(
            train_ds, cfg.pretrain, cfg.eval, cfg.data.image_size,
            region_grid=cfg.model.generator.region_grid, seed=cfg.seed,
            log=print)
        save_damsm(_snapshot(paths, "damsm"), matcher, train_ds.vocab,
                   cfg.data.image_size)
        print("matching model frozen")
    return 0


def cmd_train(cfg, paths, args):
    train_ds = _load_split(cfg, paths, "train")
    val_ds = _load_split(cfg, paths, "val")
    captioner = load_captioner(_need_snapshot(paths, "captioner"), cfg.model,
                               train_ds.vocab)
    classifier = None
    if os.path.exists(_snapshot(paths, "classifier")):
        classifier = load_classifier(_snapshot(paths, "classifier"),
                                     cfg.data.image_size, cfg.model.num_chars)
    trainer = Trainer(cfg, train_ds, val_ds, captioner, paths["train"],
                      classifier=classifier, log=print)
    if args.resume:
        trainer.load_checkpoint(args.resume)
    records = trainer.train(max_steps=args.max_steps)
    last = records[-1] if records else {}
    print(f"trained {trainer.step} steps "
          f"(G updates {trainer.counters['g_updates']}); last losses "
          + json.dumps({k: round(v, 4) for k, v in last.items()
                        if k.startswith('l_')}))
    print(f"final checkpoint: {os.path.join(paths['train'], 'checkpoint_final.pt')}")
    return 0


def _default_checkpoint(paths, args):
    ckpt = args.checkpoint or os.path.join(paths["train"], "checkpoint_final.pt")
    if not os.path.exists(ckpt):
        raise ConfigError(f"checkpoint {ckpt} not found; run `storyvis train` first")
    return ckpt


def cmd_eval(cfg, paths, args):
    ds = _load_split(cfg, paths, args.split)
    ckpt = _default_checkpoint(paths, args)
    generator = load_generator(ckpt, cfg, ds.vocab)
    captioner = load_captioner(_need_snapshot(paths, "captioner"), cfg.model,
                               ds.vocab)
    classifier = load_classifier(_need_snapshot(paths, "classifier"),
                                 cfg.data.image_size, cfg.model.num_chars)
    matcher = load_damsm(_need_snapshot(paths, "damsm"), ds.vocab,
                         cfg.data.image_size,
                         region_grid=cfg.model.generator.region_grid)
    tag = os.path.splitext(os.path.basename(ckpt))[0]
    out = os.path.join(paths["eval"], f"{args.split}-{tag}")
    report = full_report(generator, ds, captioner, classifier, matcher,
                         cfg.eval, seed=cfg.seed, out_dir=out,
                         metadata={"checkpoint": ckpt,
                                   "config_hash": config_hash(cfg)})
    print(report.to_json())
    print(f"report written to {os.path.join(out, 'metrics.json')}")
    return 0


def cmd_generate(cfg, paths, args):
    ds = _load_split(cfg, paths, args.split)
    ckpt = _default_checkpoint(paths, args)
    generator = load_generator(ckpt, cfg, ds.vocab)
    os.makedirs(paths["generate"], exist_ok=True)
    t, length = cfg.model.story_len, cfg.model.max_tokens
    outputs = []
    if args.captions:
        with open(args.captions) as f:
            stories = json.load(f)
        for i, captions in enumerate(stories):
            if len(captions) != t:
                raise ConfigError(
                    f"story {i} has {len(captions)} captions, expected {t}")
            ids = np.stack([ds.vocab.encode(c, length)[0] for c in captions])
            mask = np.stack([ds.vocab.encode(c, length)[1] for c in captions])
            frames = generator.generate_story(
                torch.from_numpy(ids)[None], torch.from_numpy(mask)[None],
                seed=cfg.seed + i)
            gen_row = tensor_to_frames(torch.stack(
                [f.image for f in frames], dim=1))[0]
            path = os.path.join(paths["generate"], f"custom_{i:03d}.png")
            save_image_grid(path, [gen_row])
            outputs.append(path)
    else:
        n = min(args.num_stories, len(ds.stories))
        batch = story_batch(ds, list(range(n)))
        frames = generator.generate_story(batch["token_ids"],
                                          batch["token_mask"], seed=cfg.seed)
        gen = tensor_to_frames(torch.stack([f.image for f in frames], dim=1))
        for i in range(n):
            story = ds.stories[i]
            path = os.path.join(paths["generate"], f"{story.story_id}.png")
            # ground truth on top, generated below
            save_image_grid(path, [story.frames, gen[i]])
            outputs.append(path)
    for path in outputs:
        print(path)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "generate": cmd_generate,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _build_config(args)
        out = _out_dir(cfg, args)
        os.makedirs(out, exist_ok=True)
        return COMMANDS[args.command](cfg, _paths(out), args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
