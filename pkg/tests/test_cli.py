"""
End-to-end tests for the trafficlm command line.
"""

import csv
import filecmp
import json
import os
import tempfile

import pytest

from packet_fixtures import conversation, fixture_corpus
from trafficlm.generation import BATCH_MANIFEST_NAME
from trafficlm.layers import LINKTYPE_ETHERNET
from trafficlm.main import DROP_REPORT_NAME, FINETUNE_CHECKPOINT, LABELS_NAME, REPORT_NAME, run
from trafficlm.pcap_io import PacketRecord, read_pcap_file, write_pcap_file

TINY_CONFIG = {
    "model": {"model_dim": 16, "embed_dim": 16, "num_heads": 2, "head_dim": 8, "local_heads": 1,
              "local_window": 8, "depth": 1, "ffn_dim": 32, "max_len": 64},
    "train": {"steps": 2, "batch_size": 2},
    "generate": {"max_tokens_total": 200, "max_restarts_per_packet": 2},
    "classify": {"max_len": 64, "test_fraction": 0.4},
}


def write_capture(path: str, flows) -> None:
    records = sorted((p for flow in flows for p in flow.packets), key=lambda p: p.timestamp_us)
    write_pcap_file(path, LINKTYPE_ETHERNET, records)


def write_config(directory: str, document=None) -> str:
    path = os.path.join(directory, "run.json")
    with open(path, "w") as f:
        json.dump(document if document is not None else TINY_CONFIG, f)
    return path


def test_single_flow_round_trip_is_byte_identical() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        capture = os.path.join(tmp, "dns.pcap")
        write_pcap_file(capture, LINKTYPE_ETHERNET, conversation(5))
        corpus = os.path.join(tmp, "corpus")
        rebuilt = os.path.join(tmp, "rebuilt")

        assert run(["tokenize", "--in", capture, "--out", corpus]) == 0
        assert run(["detokenize", "--in", corpus, "--out", rebuilt]) == 0
        assert filecmp.cmp(capture, os.path.join(rebuilt, "dns.pcap"), shallow=False)
    print("✓ test_single_flow_round_trip_is_byte_identical passed")


def test_multi_flow_capture_names_each_flow() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        capture = os.path.join(tmp, "cap.pcap")
        write_capture(capture, fixture_corpus(count=3))
        corpus = os.path.join(tmp, "corpus")
        rebuilt = os.path.join(tmp, "rebuilt")

        assert run(["tokenize", "--in", tmp, "--out", corpus, "--anonymize"]) == 0
        assert run(["detokenize", "--in", corpus, "--out", rebuilt]) == 0
        names = sorted(os.listdir(rebuilt))
        assert names == ["cap-flow-00000.pcap", "cap-flow-00001.pcap", "cap-flow-00002.pcap"], f"Got {names}"
    print("✓ test_multi_flow_capture_names_each_flow passed")


def test_split_flows_writes_drop_report() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        capture = os.path.join(tmp, "mixed.pcap")
        records = conversation(4) + [PacketRecord(1_800_000_000_000_000, LINKTYPE_ETHERNET, b"\x00" * 14)]
        write_pcap_file(capture, LINKTYPE_ETHERNET, records)
        out = os.path.join(tmp, "flows")

        assert run(["split-flows", "--in", capture, "--out", out]) == 0
        assert os.listdir(out).count("mixed-flow-00000.pcap") == 1
        _linktype, packets = read_pcap_file(os.path.join(out, "mixed-flow-00000.pcap"))
        assert len(packets) == 4
        with open(os.path.join(out, DROP_REPORT_NAME)) as f:
            report = json.loads(f.readline())
        assert report["flows"] == 1 and sum(report["dropped"].values()) == 1, f"Got {report}"
    print("✓ test_split_flows_writes_drop_report passed")


def test_self_comparison_scores_zero() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        capture = os.path.join(tmp, "real.pcap")
        write_capture(capture, fixture_corpus(count=6))
        out = os.path.join(tmp, "eval")

        assert run(["eval-jsd-packet", "--real", capture, "--gen", capture, "--out", out, "--deterministic"]) == 0
        assert run(["eval-jsd-flow", "--real", capture, "--gen", capture, "--out", out, "--deterministic"]) == 0
        for name in ("jsd_packet.json", "jsd_flow.json"):
            with open(os.path.join(out, name)) as f:
                report = json.load(f)
            assert "created" not in report
            assert all(value == 0.0 for value in report.values()), f"{name}: {report}"

        assert run(["eval-cdf", "--real", capture, "--gen", capture, "--out", out, "--field", "length"]) == 0
        with open(os.path.join(out, "cdf_length.csv")) as f:
            rows = list(csv.reader(f))
        assert {row[0] for row in rows[1:]} == {"real", "generated"}
        assert not os.path.exists(os.path.join(out, "cdf_ttl.csv"))
    print("✓ test_self_comparison_scores_zero passed")


def test_exit_codes() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "out")
        assert run(["tokenize", "--in", os.path.join(tmp, "missing.pcap"), "--out", out]) == 3
        bad = write_config(tmp, {"model": {"max_len": "long"}})
        capture = os.path.join(tmp, "dns.pcap")
        write_pcap_file(capture, LINKTYPE_ETHERNET, conversation(2))
        assert run(["tokenize", "--in", capture, "--out", out, "--config", bad]) == 2
        with pytest.raises(SystemExit):
            run(["tokenize", "--in", capture, "--out", out, "--max-len", "1"])
    print("✓ test_exit_codes passed")


def test_pretrain_then_generate() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        capture = os.path.join(tmp, "cap.pcap")
        write_capture(capture, fixture_corpus(count=6, max_packets=3))
        config = write_config(tmp)
        corpus = os.path.join(tmp, "corpus")
        trained = os.path.join(tmp, "trained")
        generated = os.path.join(tmp, "generated")

        assert run(["tokenize", "--in", capture, "--out", corpus]) == 0
        assert run(["pretrain", "--in", corpus, "--out", trained, "--config", config, "--deterministic"]) == 0
        checkpoint = os.path.join(trained, "final.tgck")
        assert os.path.exists(checkpoint)

        assert run(["generate", "--checkpoint", checkpoint, "--n", "2", "--top-k", "1",
                    "--out", generated, "--config", config, "--deterministic"]) == 0
        with open(os.path.join(generated, BATCH_MANIFEST_NAME)) as f:
            rows = [json.loads(line) for line in f]
        assert [row["index"] for row in rows] == [0, 1]
        for row in rows:
            if row["file"]:
                assert os.path.exists(os.path.join(generated, row["file"]))
    print("✓ test_pretrain_then_generate passed")


@pytest.mark.slow
def test_finetune_then_classify() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp, dict(TINY_CONFIG, train={"steps": 30, "batch_size": 4, "learning_rate": 3e-3}))
        corpora = []
        for protocol in ("udp", "tcp"):
            capture = os.path.join(tmp, f"{protocol}.pcap")
            flows = []
            for i in range(5):
                server = ("10.0.2.%d" % (1 + i), 2000 + i)
                flows.extend(conversation(2 + i % 3, protocol=protocol, server=server, payload_seed=i,
                                          start_us=1_700_000_000_000_000 + i * 10_000))
            write_pcap_file(capture, LINKTYPE_ETHERNET, sorted(flows, key=lambda p: p.timestamp_us))
            corpus = os.path.join(tmp, f"corpus-{protocol}")
            assert run(["tokenize", "--in", capture, "--out", corpus]) == 0
            corpora.append(f"{protocol}={corpus}")

        pretrained = os.path.join(tmp, "pretrained")
        assert run(["pretrain", "--in", os.path.join(tmp, "corpus-udp"), "--out", pretrained,
                    "--config", config]) == 0
        tuned = os.path.join(tmp, "tuned")
        assert run(["finetune", "--checkpoint", os.path.join(pretrained, "final.tgck"), "--out", tuned,
                    "--config", config, "--class", corpora[0], "--class", corpora[1]]) == 0
        assert os.path.exists(os.path.join(tuned, FINETUNE_CHECKPOINT))

        scored = os.path.join(tmp, "scored")
        assert run(["classify", "--checkpoint", os.path.join(tuned, FINETUNE_CHECKPOINT),
                    "--labels", os.path.join(tuned, LABELS_NAME), "--out", scored, "--config", config]) == 0
        with open(os.path.join(scored, REPORT_NAME)) as f:
            report = json.load(f)
        assert 0.0 <= report["macro_f1"] <= 1.0
    print("✓ test_finetune_then_classify passed")


def run_all_tests() -> None:
    """Run all tests."""
    print("=" * 50)
    print("Running CLI tests")
    print("=" * 50)
    print()

    test_single_flow_round_trip_is_byte_identical()
    test_multi_flow_capture_names_each_flow()
    test_split_flows_writes_drop_report()
    test_self_comparison_scores_zero()
    test_exit_codes()
    test_pretrain_then_generate()
    test_finetune_then_classify()

    print()
    print("=" * 50)
    print("All tests passed!")
    print("=" * 50)


if __name__ == "__main__":
    run_all_tests()
