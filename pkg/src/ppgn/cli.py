"""Command-line interface.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .anchors import kmeans_anchors
from .checkpoint import load_checkpoint
from .config import RunConfig
from .data import World, generate_world, write_image_file
from .errors import InvalidInputError, NumericFailure, PpgnError
from .pipeline import evaluate, predict, train


def _cmd_gen_data(args) -> int:
    world = generate_world(args.scenes, seed=args.seed, image_size=args.image_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    world.save(out / "annotations.json")
    print(f"wrote {out / 'annotations.json'} ({len(world.scenes)} scenes, "
          f"{sum(len(s.phrases) for s in world.scenes)} phrases)")
    if args.export_images:
        img_dir = out / "images"
        img_dir.mkdir(exist_ok=True)
        for scene in world.scenes:
            write_image_file(
                img_dir / f"scene_{scene.scene_id:06d}.img", world.render(scene)
            )
        print(f"exported {len(world.scenes)} images to {img_dir}")
    return 0


def _cmd_anchors(args) -> int:
    dataset = Path(args.data)
    if dataset.is_dir():
        dataset = dataset / "annotations.json"
    world = World.load(dataset)
    sizes = world.gt_sizes("train")
    priors = kmeans_anchors(sizes, args.k, seed=args.seed)
    print(f"# {args.k} anchor priors from {len(sizes)} training boxes")
    for w, h in priors:
        print(f"{w:.6f} x {h:.6f}")
    print("# config line: anchors = " + ",".join(f"{w:.6f}x{h:.6f}" for w, h in priors))
    return 0


def _cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    if args.loss:
        config.loss = args.loss
        RunConfig(**config.__dict__)  # re-validate
    result = train(config)
    print(f"trained {config.max_steps} steps in {result.seconds:.0f}s")
    print(f"best val recall@{config.k}: {result.best_val_recall:.4f} "
          f"at step {result.best_step}")
    print(f"checkpoints: {result.best_checkpoint} (best), "
          f"{result.final_checkpoint} (final)")
    print(result.val_report.summary())
    return 0


def _load_world(ckpt, override: str | None) -> World:
    path = Path(override if override else ckpt.config.dataset)
    if path.is_dir():
        path = path / "annotations.json"
    return World.load(path)


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    world = _load_world(ckpt, args.data)
    report = evaluate(
        ckpt.model, world, ckpt.anchor_set, ckpt.vocab, args.split,
        ks=(1, args.k), batch_size=ckpt.config.batch_size,
    )
    print(report.summary())
    print(report.to_json())
    if args.dump_boxes:
        _dump_boxes(ckpt, world, args.split, args.k, args.dump_boxes)
        print(f"wrote proposals to {args.dump_boxes}")
    return 0


def _dump_boxes(ckpt, world: World, split: str, k: int, path: str):
    from .pipeline import select_proposals
    from . import tensor as T
    from .data import preprocess, tokenize

    records = []
    ckpt.model.eval()
    with T.no_grad():
        for scene in world.scenes_in(split):
            net_in, _ = preprocess(
                world.render(scene), world.mean_pixel, ckpt.config.image_size
            )
            for phrase in scene.phrases:
                raw = ckpt.model.forward(
                    net_in[None], [tokenize(phrase.tokens, ckpt.vocab)]
                ).data[0]
                props = select_proposals(raw, ckpt.anchor_set, k)
                records.append({
                    "scene": scene.scene_id,
                    "phrase": " ".join(phrase.tokens),
                    "target": list(scene.objects[phrase.target].box.corners()),
                    "proposals": [
                        {"box": list(b.corners()), "confidence": c}
                        for b, c in props
                    ],
                })
    Path(path).write_text(
        "\n".join(json.dumps(r, sort_keys=True) for r in records) + "\n",
        encoding="utf-8",
    )


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    world = _load_world(ckpt, args.data)
    tokens = args.phrase.split()
    rows = predict(ckpt, world, args.scene, tokens, args.k)
    print(f"scene {args.scene}, phrase {args.phrase!r}, top {len(rows)} proposals:")
    print(f"{'rank':<6}{'confidence':<12}{'cx':>8}{'cy':>8}{'w':>8}{'h':>8}"
          f"   source px (x1,y1,x2,y2)")
    for rank, (box, conf, px) in enumerate(rows, 1):
        print(f"{rank:<6}{conf:<12.4f}{box.cx:>8.4f}{box.cy:>8.4f}"
              f"{box.w:>8.4f}{box.h:>8.4f}   "
              f"({px[0]:.1f}, {px[1]:.1f}, {px[2]:.1f}, {px[3]:.1f})")
    return 0


def _cmd_ablate_k(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    world = _load_world(ckpt, args.data)
    ks = [int(v) for v in args.k_list.split(",")]
    if not ks or any(k < 1 for k in ks):
        raise InvalidInputError(f"bad k list {args.k_list!r}")
    report = evaluate(
        ckpt.model, world, ckpt.anchor_set, ckpt.vocab, args.split, ks=ks,
        batch_size=ckpt.config.batch_size,
    )
    print(f"proposal-count sweep on split {args.split!r} "
          f"({report.num_samples} phrases)")
    print(f"{'K':>4}  {'recall@K':>9}")
    for k in sorted(report.recall_at_k):
        print(f"{k:>4}  {report.recall_at_k[k]:>9.4f}")
    print(report.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgn",
        description="Phrase-guided box proposal generation on a synthetic world",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--export-images", action="store_true")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("anchors", help="cluster anchor priors from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=_cmd_anchors)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--loss", choices=("kld", "softmax"))
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--data")
    p.add_argument("--dump-boxes", metavar="FILE")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("predict", help="rank proposals for one phrase")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", type=int, required=True)
    p.add_argument("--phrase", required=True)
    p.add_argument("--k", type=int, default=7)
    p.add_argument("--data")
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("ablate-k", help="recall sweep over proposal counts")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--k-list", default="1,4,7,10,13,16")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--data")
    p.set_defaults(fn=_cmd_ablate_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except PpgnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
