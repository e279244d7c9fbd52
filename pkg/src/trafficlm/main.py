"""
trafficlm - CLI Interface
Batch commands for building token corpora from pcaps, training the flow
language model, generating traffic, classifying flows and evaluating
generated traffic against real traffic.
"""

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import torch

from . import classifier, codec, generation, metrics, pcap_io, training
from .config import RunConfig, apply_overrides, load_run_config, resolve_threads
from .errors import ConfigError, DataError, TrafficLMError
from .model import MECHANISMS, build_model, load_checkpoint, save_checkpoint

logger = logging.getLogger("trafficlm")

# Constants
SEPARATOR_WIDTH = 50
PCAP_SUFFIXES = (".pcap", ".cap")
DROP_REPORT_NAME = "drops.jsonl"
LABELS_NAME = "labels.jsonl"
REPORT_NAME = "report.json"
FINETUNE_CHECKPOINT = "finetuned.tgck"
CDF_FIELDS = ("length", "ttl", "sport", "dport") + metrics.FEATURE_NAMES


def print_section(title: str) -> None:
    print("\n" + "=" * SEPARATOR_WIDTH)
    print(title)
    print("=" * SEPARATOR_WIDTH)


def print_rows(rows: Dict[str, Any]) -> None:
    for key, value in rows.items():
        if isinstance(value, float):
            value = f"{value:.4f}"
        print(f"  {key}: {value}")


def write_json(path: str, document: Dict[str, Any], deterministic: bool) -> None:
    if not deterministic:
        document = dict(document, created=time.strftime("%Y-%m-%dT%H:%M:%S"))
    with open(path, "w") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")


def pcap_paths(paths: Sequence[str], command: str) -> List[str]:
    """Expand files and directories into a sorted list of capture files."""
    found: List[str] = []
    for path in paths:
        if os.path.isdir(path):
            found.extend(sorted(os.path.join(path, name) for name in os.listdir(path)
                                if name.endswith(PCAP_SUFFIXES)))
        elif os.path.isfile(path):
            found.append(path)
        else:
            raise DataError(f"input {path} does not exist", operation=f"cli.{command}")
    if not found:
        raise DataError(f"no capture files under {list(paths)}", operation=f"cli.{command}")
    return found


def load_flows(paths: Sequence[str], command: str) -> List[pcap_io.Flow]:
    flows: List[pcap_io.Flow] = []
    for path in pcap_paths(paths, command):
        _linktype, records = pcap_io.read_pcap_file(path)
        flows.extend(pcap_io.split_flows(records).flows)
    return flows


def stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def tokenize_file(path: str, anonymize: Tuple[str, ...]) -> List[Tuple[List[int], int, str]]:
    """(tokens, first-packet time in us, source) for every flow of one capture."""
    _linktype, records = pcap_io.read_pcap_file(path)
    split = pcap_io.split_flows(records)
    single = len(split.flows) == 1
    rows = []
    for index, flow in enumerate(split.flows):
        if anonymize:
            flow = pcap_io.anonymize(flow, anonymize)
        source = stem(path) if single else f"{stem(path)}-flow-{index:05d}"
        rows.append((codec.tokenize_flow(flow), flow.packets[0].timestamp_us, source))
    return rows


def corpus_flows(directory: str) -> List[List[int]]:
    return list(codec.iter_corpus(directory))


def flows_as_tokens(flows: Iterable[pcap_io.Flow], anonymize: Sequence[str]) -> List[List[int]]:
    return [codec.tokenize_flow(pcap_io.anonymize(f, anonymize)) for f in flows]


# Commands

def cmd_split_flows(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    os.makedirs(args.out, exist_ok=True)
    totals = {"captures": 0, "flows": 0, "dropped_packets": 0}
    with open(os.path.join(args.out, DROP_REPORT_NAME), "w") as report:
        for path in pcap_paths(args.inputs, "split-flows"):
            linktype, records = pcap_io.read_pcap_file(path)
            split = pcap_io.split_flows(records)
            pcap_io.write_drop_report(report, path, split)
            for index, flow in enumerate(split.flows):
                name = f"{stem(path)}-flow-{index:05d}.pcap"
                pcap_io.write_pcap_file(os.path.join(args.out, name), linktype, flow.packets)
            totals["captures"] += 1
            totals["flows"] += len(split.flows)
            totals["dropped_packets"] += split.dropped_count
    return totals


def iter_tokenized(paths: Sequence[str], policy: Tuple[str, ...], workers: int
                   ) -> Iterator[List[Tuple[List[int], int, str]]]:
    # at most `workers` captures are in flight at once
    if workers <= 1:
        for path in paths:
            yield tokenize_file(path, policy)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(paths), workers):
            chunk = paths[start:start + workers]
            yield from pool.map(tokenize_file, chunk, [policy] * len(chunk))


def cmd_tokenize(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    policy = tuple(config.io.anonymize) if args.anonymize else ()
    paths = pcap_paths(args.inputs, "tokenize")
    writer = codec.ShardWriter(args.out, config.codec.flows_per_shard)
    for rows in iter_tokenized(paths, policy, resolve_threads(config)):
        for tokens, base_time_us, source in rows:
            writer.add(tokens, base_time_us, source)
    writer.close()
    return {"captures": len(paths), "flows": writer.flows, "shards": len(writer.entries),
            "tokens": writer.tokens, "anonymized": bool(policy)}


def cmd_detokenize(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for entry in codec.read_manifest(args.inputs[0]):
        flows = codec.iter_shard_flows(os.path.join(args.inputs[0], entry.path))
        for index, tokens in enumerate(flows):
            base_us = entry.base_times_us[index] if index < len(entry.base_times_us) else 0
            source = entry.sources[index] if index < len(entry.sources) else f"{stem(entry.path)}-{index:05d}"
            flow = codec.detokenize_flow(tokens, Fraction(base_us, pcap_io.USEC_PER_SEC))
            pcap_io.write_pcap_file(os.path.join(args.out, f"{source}.pcap"), flow.linktype, flow.packets)
            written += 1
    return {"flows": written}


def cmd_pretrain(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    corpus = codec.Corpus(args.inputs[0])
    train_flows, test_flows = codec.split_corpus(corpus, seed=config.seed)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(config.model, config.seed)
    windows = training.WindowIndex(train_flows, model.max_len, config.train.stride, config.train.pack_flows)
    result = training.train(model, windows, config.train, out_dir=args.out, extra={"kind": "pretrain"})

    summary: Dict[str, Any] = {
        "train_flows": len(train_flows),
        "test_flows": len(test_flows),
        "windows": len(windows),
        "steps": config.train.steps,
        "final_loss": result.loss_curve[-1][1] if result.loss_curve else None,
        "train_accuracy": training.next_token_accuracy(model, windows) if len(windows) else None,
    }
    if test_flows:
        test_windows = training.WindowIndex(test_flows, model.max_len)
        summary["test_loss"] = training.evaluate_loss(model, test_windows)
    return summary


def labeled_flows(classes: Sequence[Tuple[str, int, str]]) -> List[classifier.LabeledFlow]:
    flows = []
    for directory, class_index, class_name in classes:
        flows.extend(classifier.LabeledFlow(tokens, class_index, class_name) for tokens in corpus_flows(directory))
    return flows


def parse_classes(specs: Sequence[str]) -> List[Tuple[str, int, str]]:
    classes = []
    for index, spec in enumerate(specs):
        name, sep, directory = spec.partition("=")
        if not sep or not name or not directory:
            raise ConfigError(f"--class expects NAME=CORPUS_DIR, got {spec!r}")
        classes.append((directory, index, name))
    return classes


def cmd_finetune(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    if not args.classes:
        raise ConfigError("finetune needs at least one --class NAME=CORPUS_DIR")
    os.makedirs(args.out, exist_ok=True)
    classes = parse_classes(args.classes)
    flows = labeled_flows(classes)
    settings = config.classify
    train_idx, test_idx = classifier.stratified_split([f.class_index for f in flows], settings.test_fraction,
                                                      config.seed)
    model, _ = load_checkpoint(args.checkpoint)
    classifier.finetune(model, [flows[i] for i in train_idx], config.train, settings.label_width, settings.max_len)
    save_checkpoint(os.path.join(args.out, FINETUNE_CHECKPOINT), model, config.train.steps, config.seed,
                    {"kind": "finetune", "label_width": settings.label_width, "num_classes": len(classes),
                     "max_len": settings.max_len})
    classifier.write_labeled_manifest(os.path.join(args.out, LABELS_NAME), classes)

    report = classifier.evaluate(model, [flows[i] for i in test_idx], settings.label_width, len(classes),
                                 settings.max_len)
    write_json(os.path.join(args.out, REPORT_NAME), report.to_dict(), args.deterministic)
    return {"classes": len(classes), "train_flows": len(train_idx), "test_flows": len(test_idx),
            "accuracy": report.accuracy, "macro_f1": report.macro_f1}


def cmd_classify(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    os.makedirs(args.out, exist_ok=True)
    model, header = load_checkpoint(args.checkpoint)
    width = int(header.get("label_width", config.classify.label_width))
    max_len = int(header.get("max_len", config.classify.max_len))
    num_classes = header.get("num_classes")

    summary: Dict[str, Any] = {}
    if args.labels:
        classes = classifier.read_labeled_manifest(args.labels)
        report = classifier.evaluate(model, labeled_flows(classes), width, num_classes or len(classes), max_len)
        write_json(os.path.join(args.out, REPORT_NAME), report.to_dict(), args.deterministic)
        summary.update(accuracy=report.accuracy, macro_f1=report.macro_f1)
    if args.inputs:
        tokens = flows_as_tokens(load_flows(args.inputs, "classify"), config.io.anonymize)
        predictions = classifier.predict_many(model, tokens, width, num_classes, max_len)
        with open(os.path.join(args.out, "predictions.jsonl"), "w") as f:
            for index, predicted in enumerate(predictions):
                f.write(json.dumps({"flow": index, "class_index": predicted}) + "\n")
        summary["predicted_flows"] = len(predictions)
    if not summary:
        raise ConfigError("classify needs --labels and/or --in")
    return summary


def cmd_generate(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    model, _ = load_checkpoint(args.checkpoint)
    rows = generation.generate_batch(model, args.n, config.generate, args.out,
                                     workers=resolve_threads(config))
    return {
        "requested": args.n,
        "written": sum(1 for r in rows if r["file"]),
        "aborted": sum(1 for r in rows if r["termination"] == generation.ABORT_REASON),
        "write_failed": sum(1 for r in rows if r["termination"] == generation.WRITE_FAILED_REASON),
        "restarts": sum(r["restarts"] for r in rows),
    }


def cmd_eval_jsd_packet(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    report = metrics.header_jsd_report(load_flows([args.real], "eval-jsd-packet"),
                                       load_flows([args.gen], "eval-jsd-packet"))
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "jsd_packet.json"), report, args.deterministic)
    return report


def cmd_eval_jsd_flow(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    report = metrics.flow_feature_distributions(load_flows([args.real], "eval-jsd-flow"),
                                                load_flows([args.gen], "eval-jsd-flow"), config.eval).to_dict()
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "jsd_flow.json"), report, args.deterministic)
    return report


def field_samples(flows: Sequence[pcap_io.Flow], name: str, chunk_size: int) -> List[float]:
    if name in metrics.FEATURE_NAMES:
        index = metrics.FEATURE_NAMES.index(name)
        return [metrics.flow_feature_vector(f, chunk_size)[index] for f in flows]
    values, _skipped = metrics.packet_header_fields(flows)
    return values[name]


def cmd_eval_cdf(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    real = load_flows([args.real], "eval-cdf")
    generated = load_flows([args.gen], "eval-cdf")
    os.makedirs(args.out, exist_ok=True)
    names = args.fields or list(CDF_FIELDS)
    for name in names:
        samples = {"real": field_samples(real, name, config.eval.chunk_size),
                   "generated": field_samples(generated, name, config.eval.chunk_size)}
        metrics.cdf_export(samples, name, os.path.join(args.out, f"cdf_{name}.csv"))
    return {"fields": len(names)}


def cmd_discriminate(args: argparse.Namespace, config: RunConfig) -> Dict[str, Any]:
    model, _ = load_checkpoint(args.checkpoint)
    real = flows_as_tokens(load_flows([args.real], "discriminate"), config.io.anonymize)
    generated = flows_as_tokens(load_flows([args.gen], "discriminate"), config.io.anonymize)
    result = classifier.discriminate(model, real, generated, config.train, config.classify.discriminator_seeds,
                                     config.classify.max_len, config.classify.test_fraction)
    document = {"scores": result.scores, "mean": result.mean, "std": result.std, "formatted": result.formatted()}
    os.makedirs(args.out, exist_ok=True)
    write_json(os.path.join(args.out, "discriminate.json"), document, args.deterministic)
    return {"macro_f1": result.formatted()}


COMMANDS = {
    "split-flows": cmd_split_flows,
    "tokenize": cmd_tokenize,
    "detokenize": cmd_detokenize,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "classify": cmd_classify,
    "generate": cmd_generate,
    "eval-jsd-packet": cmd_eval_jsd_packet,
    "eval-jsd-flow": cmd_eval_jsd_flow,
    "eval-cdf": cmd_eval_cdf,
    "discriminate": cmd_discriminate,
}


def max_len_arg(value: str) -> int:
    try:
        length = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--max-len expects an integer, got {value!r}")
    if length < 2:
        raise argparse.ArgumentTypeError(f"--max-len must be >= 2, got {length}")
    return length


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run config (default: desk preset)")
    common.add_argument("--seed", type=int, default=None, help="Override the run seed")
    common.add_argument("--out", type=str, required=True, help="Output directory")
    common.add_argument("--max-len", type=max_len_arg, default=None,
                        help="Model window: 3072, 12032 or any N >= 2")
    common.add_argument("--mechanism", type=str, choices=MECHANISMS, default=None,
                        help="Global attention mechanism")
    common.add_argument("--top-k", type=int, default=None, help="Top-k sampling cutoff")
    common.add_argument("--deterministic", action="store_true",
                        help="Single-threaded numerics and no timestamps in outputs")
    common.add_argument("--verbose", "-v", action="count", default=0, help="More logging (repeatable)")

    parser = argparse.ArgumentParser(prog="trafficlm", description="Generative pre-trained model for network traffic")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        return sub.add_parser(name, parents=[common], help=help_text)

    p = command("split-flows", "Split captures into one pcap per bidirectional flow")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="pcap files or directories")

    p = command("tokenize", "Tokenize captures into a shard corpus")
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="pcap files or directories")
    p.add_argument("--anonymize", action="store_true", help="Zero the io.anonymize fields first")

    p = command("detokenize", "Rebuild pcaps from a shard corpus")
    p.add_argument("--in", dest="inputs", nargs=1, required=True, help="Corpus directory")

    p = command("pretrain", "Pre-train the language model on a corpus")
    p.add_argument("--in", dest="inputs", nargs=1, required=True, help="Corpus directory")
    p.add_argument("--checkpoint", type=str, default=None, help="Resume from this checkpoint")

    p = command("finetune", "Fine-tune a pre-trained checkpoint for classification")
    p.add_argument("--checkpoint", type=str, required=True, help="Pre-trained checkpoint")
    p.add_argument("--class", dest="classes", action="append", default=[],
                   help="NAME=CORPUS_DIR; repeat once per class, in class-index order")

    p = command("classify", "Classify flows with a fine-tuned checkpoint")
    p.add_argument("--checkpoint", type=str, required=True, help="Fine-tuned checkpoint")
    p.add_argument("--labels", type=str, default=None, help="Labeled corpus manifest to score")
    p.add_argument("--in", dest="inputs", nargs="+", default=None, help="Unlabeled pcaps to predict")

    p = command("generate", "Generate flows as pcap files")
    p.add_argument("--checkpoint", type=str, required=True, help="Pre-trained checkpoint")
    p.add_argument("--n", type=int, default=1000, help="Number of flows (default: 1000)")

    for name, help_text in (("eval-jsd-packet", "Header-field JSD between real and generated pcaps"),
                            ("eval-jsd-flow", "Flow-feature JSD between real and generated pcaps"),
                            ("eval-cdf", "CDF exports for real and generated pcaps"),
                            ("discriminate", "Real-vs-generated discrimination test")):
        p = command(name, help_text)
        p.add_argument("--real", type=str, required=True, help="Real pcap file or directory")
        p.add_argument("--gen", type=str, required=True, help="Generated pcap file or directory")
        if name == "eval-cdf":
            p.add_argument("--field", dest="fields", action="append", choices=CDF_FIELDS, default=None,
                           help="Field to export (repeatable; default: all)")
        if name == "discriminate":
            p.add_argument("--checkpoint", type=str, required=True, help="Pre-trained checkpoint")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = apply_overrides(load_run_config(args.config), seed=args.seed, max_len=args.max_len,
                                 mechanism=args.mechanism, top_k=args.top_k)
        threads = 1 if args.deterministic else resolve_threads(config)
        torch.set_num_threads(threads)

        print("=" * SEPARATOR_WIDTH)
        print(f"trafficlm {args.command}")
        print("=" * SEPARATOR_WIDTH)
        summary = COMMANDS[args.command](args, config)
    except TrafficLMError as e:
        print(f"error: {e.describe()}", file=sys.stderr)
        return e.exit_code

    print_section("SUMMARY")
    print_rows(summary)
    print()
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
