"""Vocabulary, log parsing, windowing, and splitting."""

import numpy as np
import pytest

from evseq.errors import EmptyLogError, NoKnownEventsError, ParseError
from evseq.events import (
    EventSequence,
    EventVocabulary,
    RawEventLog,
    discretize,
    load_event_log,
    load_vocabulary,
    make_targets,
    save_event_log,
    save_vocabulary,
    split_train_test,
)


def two_event_vocab():
    return EventVocabulary(["A", "B"], ["medication", "lab"], [True, True])


def test_vocabulary_basics():
    vocab = EventVocabulary(
        ["A", "B", "C"], ["medication", "lab", "procedure"], [True, False, True]
    )
    assert len(vocab) == 3
    assert vocab.n_targets == 2
    assert vocab.index_of("B") == 1
    assert vocab.index_of("missing") is None
    assert list(vocab.target_indices) == [0, 2]
    assert vocab.target_name(1) == "C"
    assert vocab.target_category(1) == "procedure"


def test_vocabulary_validation():
    with pytest.raises(ValueError):
        EventVocabulary(["A", "A"], ["lab", "lab"], [True, True])
    with pytest.raises(ValueError):
        EventVocabulary(["A"], ["bogus"], [True])
    with pytest.raises(ValueError):
        EventVocabulary(["A", "B"], ["lab", "lab"], [False, False])


def test_vocabulary_file_roundtrip(tmp_path):
    vocab = EventVocabulary(
        ["med_x", "lab_y", "proc_z"],
        ["medication", "lab", "procedure"],
        [True, True, False],
    )
    path = tmp_path / "vocab.tsv"
    save_vocabulary(vocab, path)
    loaded = load_vocabulary(path)
    assert loaded.names == vocab.names
    assert loaded.categories == vocab.categories
    assert np.array_equal(loaded.target_mask, vocab.target_mask)
    save_vocabulary(loaded, tmp_path / "again.tsv")
    assert (tmp_path / "again.tsv").read_bytes() == path.read_bytes()


def test_vocabulary_file_errors(tmp_path):
    path = tmp_path / "vocab.tsv"
    path.write_text("A\tnot_a_category\t1\n")
    with pytest.raises(ParseError):
        load_vocabulary(path)
    path.write_text("A\tlab\t2\n")
    with pytest.raises(ParseError):
        load_vocabulary(path)
    path.write_text("# only comments\n")
    with pytest.raises(ParseError):
        load_vocabulary(path)


def test_discretize_two_windows():
    log = RawEventLog("p1", [("A", 1.0), ("A", 2.0), ("B", 30.0)])
    seq = discretize(log, two_event_vocab(), 24.0)
    assert np.array_equal(seq.inputs, [[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(seq.targets, [[0.0, 1.0]])


def test_discretize_single_window():
    seq = discretize(RawEventLog("p1", [("A", 0.0)]), two_event_vocab(), 24.0)
    assert seq.inputs.shape == (1, 2)
    assert seq.targets.shape == (0, 2)


def test_discretize_boundary_goes_to_later_window():
    seq = discretize(RawEventLog("p1", [("A", 24.0)]), two_event_vocab(), 24.0)
    assert seq.inputs.shape == (2, 2)
    assert np.array_equal(seq.inputs, [[0.0, 0.0], [1.0, 0.0]])


def test_discretize_sub_day_windows():
    log = RawEventLog("p1", [("A", 1.0), ("B", 7.0), ("B", 13.0)])
    seq = discretize(log, two_event_vocab(), 6.0)
    assert np.array_equal(
        seq.inputs, [[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
    )


def test_discretize_unknown_events_skipped(caplog):
    log = RawEventLog("p1", [("A", 0.0), ("mystery", 1.0), ("mystery", 30.0)])
    with caplog.at_level("WARNING"):
        seq = discretize(log, two_event_vocab(), 24.0)
    assert "2" in caplog.text and "unknown" in caplog.text
    # Unknown events do not extend the sequence.
    assert seq.inputs.shape == (1, 2)


def test_discretize_errors():
    vocab = two_event_vocab()
    with pytest.raises(EmptyLogError):
        discretize(RawEventLog("p1", []), vocab)
    with pytest.raises(NoKnownEventsError):
        discretize(RawEventLog("p1", [("zzz", 1.0)]), vocab)
    with pytest.raises(ParseError):
        discretize(RawEventLog("p1", [("A", -1.0)]), vocab)
    with pytest.raises(ValueError):
        discretize(RawEventLog("p1", [("A", 1.0)]), vocab, 0.0)


def test_discretize_bucket_property(rng):
    """Every known event lands in floor(ts/W); nothing is lost."""
    vocab = EventVocabulary(
        [f"e{i}" for i in range(5)],
        ["medication"] * 5,
        [True] * 5,
    )
    for trial in range(20):
        w = float(rng.choice([6.0, 12.0, 24.0]))
        ts = np.sort(rng.uniform(0, 200, size=30))
        names = [f"e{int(i)}" for i in rng.integers(0, 5, size=30)]
        log = RawEventLog("p", list(zip(names, ts)))
        seq = discretize(log, vocab, w)
        assert len(seq) == int(ts[-1] // w) + 1
        expected = np.zeros_like(seq.inputs)
        for name, stamp in log.events:
            expected[int(stamp // w), vocab.index_of(name)] = 1.0
        assert np.array_equal(seq.inputs, expected)
        assert np.array_equal(seq.targets, expected[1:])


def test_targets_are_masked_next_inputs():
    inputs = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0]])
    mask = np.array([True, False, True])
    targets = make_targets(inputs, mask)
    assert np.array_equal(targets, [[0.0, 1.0], [1.0, 0.0]])


def test_prefix():
    inputs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    seq = EventSequence("p", inputs, make_targets(inputs, np.array([True, True])))
    pre = seq.prefix(2)
    assert np.array_equal(pre.inputs, inputs[:2])
    assert np.array_equal(pre.targets, seq.targets[:1])
    with pytest.raises(ValueError):
        seq.prefix(0)
    with pytest.raises(ValueError):
        seq.prefix(4)


def test_load_event_log(tmp_path):
    path = tmp_path / "events.tsv"
    path.write_text(
        "# header comment\n"
        "p2\tA\t1.5\n"
        "\n"
        "p1\tB\t0.0\n"
        "p2\tC\t3.25\n",
        encoding="utf-8",
    )
    logs = load_event_log(path)
    assert [log.patient_id for log in logs] == ["p2", "p1"]
    assert logs[0].events == [("A", 1.5), ("C", 3.25)]
    assert logs[1].events == [("B", 0.0)]


def test_load_event_log_errors(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("p1\tA\n")
    with pytest.raises(ParseError, match=":1:"):
        load_event_log(path)
    path.write_text("p1\tA\t1.0\np1\tB\tnope\n")
    with pytest.raises(ParseError, match=":2:"):
        load_event_log(path)
    path.write_text("p1\tA\t-3.0\n")
    with pytest.raises(ParseError, match=":1:"):
        load_event_log(path)
    with pytest.raises(ValueError):
        load_event_log(path, format="json")


def test_load_event_log_sorts_with_warning(tmp_path, caplog):
    path = tmp_path / "unsorted.tsv"
    path.write_text("p1\tA\t10.0\np1\tB\t2.0\n")
    with caplog.at_level("WARNING"):
        logs = load_event_log(path)
    assert "out of order" in caplog.text
    assert logs[0].events == [("B", 2.0), ("A", 10.0)]


def test_event_log_roundtrip_fuzz(tmp_path, rng):
    """Canonical files survive save -> load -> save byte for byte."""
    logs = []
    for p in range(40):
        n = int(rng.integers(1, 30))
        ts = np.sort(rng.uniform(0, 500, size=n))
        names = [f"evt_{int(i):02d}" for i in rng.integers(0, 12, size=n)]
        logs.append(RawEventLog(f"pt{p:03d}", list(zip(names, ts))))
    assert sum(len(log.events) for log in logs) > 500
    path = tmp_path / "events.tsv"
    save_event_log(logs, path)
    reloaded = load_event_log(path)
    again = tmp_path / "events2.tsv"
    save_event_log(reloaded, again)
    assert again.read_bytes() == path.read_bytes()
    assert [log.patient_id for log in reloaded] == [log.patient_id for log in logs]
    for a, b in zip(reloaded, logs):
        assert a.events == b.events


def test_split_train_test():
    data = [f"p{i}" for i in range(10)]
    train, test = split_train_test(data, 0.8, seed=0)
    assert len(train) == 8 and len(test) == 2
    assert sorted(train + test) == sorted(data)
    assert set(train) & set(test) == set()
    train2, test2 = split_train_test(data, 0.8, seed=0)
    assert train == train2 and test == test2
    train3, _ = split_train_test(data, 0.8, seed=1)
    assert train != train3


def test_split_edge_cases():
    data = list(range(30))
    train, test = split_train_test(data, 0.99, seed=0)
    assert len(test) >= 1
    train, test = split_train_test(data, 0.01, seed=0)
    assert len(train) >= 1
    with pytest.raises(ValueError):
        split_train_test(data, 1.0, seed=0)
    with pytest.raises(ValueError):
        split_train_test([1], 0.5, seed=0)
