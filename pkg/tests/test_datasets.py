import json
import re
import string

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from qacoop import datasets as ds


def _record(vid="v1", n_pairs=10, split="train", caption="A man walks.", summary="A man walks."):
    return ds.DialogueRecord(vid, caption, tuple((f"q{i}?", f"a{i}.") for i in range(n_pairs)),
                             summary, split)


def _manifest(tmp_path, records, name="test.json"):
    path = tmp_path / name
    ds.save_manifest(path, records)
    return path


# ----------------------------------------------------------------------------- manifests

def test_manifest_round_trip_preserves_order(tmp_path):
    recs = [_record(f"vid{i:03d}", split="test") for i in (5, 1, 3)]
    out = ds.load_manifest(_manifest(tmp_path, recs))
    assert [r.video_id for r in out] == ["vid005", "vid001", "vid003"]
    assert out == recs


def test_manifest_with_733_test_records(tmp_path):
    recs = [_record(f"t{i}", split="test") for i in range(733)]
    out = ds.load_manifest(_manifest(tmp_path, recs))
    assert len(out) == 733
    assert all(r.split == "test" for r in out)


def test_empty_manifest(tmp_path):
    assert ds.load_manifest(_manifest(tmp_path, [])) == []


def test_nine_pairs_names_the_video(tmp_path):
    doc = {"dialogs": [_record("ok").to_json(), _record("bad").to_json()]}
    doc["dialogs"][1]["dialog"].pop()
    path = tmp_path / "train.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(ds.ManifestError) as err:
        ds.load_manifest(path)
    assert err.value.video_id == "bad"
    assert "bad" in str(err.value)


def test_missing_field_and_duplicates(tmp_path):
    entry = _record("x").to_json()
    del entry["summary"]
    path = tmp_path / "val.json"
    path.write_text(json.dumps({"dialogs": [entry]}))
    with pytest.raises(ds.ManifestError, match="summary") as err:
        ds.load_manifest(path)
    assert err.value.video_id == "x"

    path.write_text(json.dumps({"dialogs": [_record("d").to_json()] * 2}))
    with pytest.raises(ds.ManifestError, match="duplicate") as err:
        ds.load_manifest(path)
    assert err.value.video_id == "d"


def test_record_invariants():
    with pytest.raises(ds.ManifestError):
        _record(split="dev")
    with pytest.raises(ds.ManifestError):
        _record(summary="   ")
    with pytest.raises(ds.ManifestError):
        _record(n_pairs=11)


# ----------------------------------------------------------------------------- feature files

def test_feature_file_size_and_round_trip(tmp_path):
    x = np.random.default_rng(0).standard_normal((4, 49, 512)).astype(np.float32)
    path = tmp_path / "a.qacf"
    ds.write_feature_file(path, x)
    assert path.stat().st_size == 4 + 4 + 3 * 4 + 4 * 49 * 512 * 4
    y = ds.read_feature_file(path)
    assert y.dtype == np.float32 and y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_rank_one_round_trip(tmp_path):
    x = np.linspace(-1, 1, 256, dtype=np.float32)
    ds.write_feature_file(tmp_path / "b.qacf", x)
    assert ds.read_feature_file(tmp_path / "b.qacf").tobytes() == x.tobytes()


def test_feature_file_errors(tmp_path):
    path = tmp_path / "c.qacf"
    ds.write_feature_file(path, np.ones((3, 5), np.float32))
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ds.FeatureFileError, match="size mismatch"):
        ds.read_feature_file(path)
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ds.FeatureFileError, match="magic"):
        ds.read_feature_file(path)
    path.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ds.FeatureFileError, match="rank"):
        ds.read_feature_file(path)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=6),
                  elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_feature_round_trip_property(tmp_path_factory, x):
    path = tmp_path_factory.mktemp("f") / "x.qacf"
    ds.write_feature_file(path, x)
    y = ds.read_feature_file(path)
    assert y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_feature_store_missing(tmp_path):
    store = ds.FeatureStore(tmp_path)
    assert "nothing" not in store
    with pytest.raises(ds.MissingFeatureError, match="nothing"):
        store["nothing"]


# ----------------------------------------------------------------------------- text

def test_vocabulary_min_count():
    recs = [ds.DialogueRecord("v", "a b", tuple(("a", "a") for _ in range(10)), "b")]
    vocab = ds.build_vocabulary(recs, min_count=21)
    assert vocab.itos == list(ds.RESERVED) + ["a"]
    assert set(ds.build_vocabulary(recs, 1).itos) == set(ds.RESERVED) | {"a", "b"}


def test_vocabulary_uses_train_split_only():
    recs = [_record("t", caption="alpha"), _record("s", split="test", caption="omega")]
    vocab = ds.build_vocabulary(recs)
    assert "alpha" in vocab and "omega" not in vocab
    with pytest.raises(ValueError):
        ds.build_vocabulary([_record(split="test")])
    with pytest.raises(ValueError):
        ds.build_vocabulary(recs, min_count=0)


def test_reserved_ids_and_json_round_trip(tmp_path, vocab32):
    assert [vocab32.id(t) for t in ds.RESERVED] == [ds.PAD_ID, ds.SOS_ID, ds.EOS_ID, ds.UNK_ID]
    vocab32.save(tmp_path / "v.json")
    assert ds.Vocabulary.load(tmp_path / "v.json") == vocab32


def _grammar_terminals():
    """Words of every template with every attribute value, enumerated from scratch."""
    words = set()
    templates = [ds.CAPTION_TEMPLATE, ds.SUMMARY_TEMPLATE] + [t for qa in ds.QA_TEMPLATES for t in qa]
    for t in templates:
        literal = re.sub(r"\{\w+\}", " ", t).lower()
        words |= {w for w in re.split(f"[\\s{re.escape(string.punctuation)}]+", literal) if w}
    for values in ds.ATTRIBUTES.values():
        words |= set(values)
    return words


def test_synthetic_vocabulary_is_grammar_alphabet():
    records, _, scenes = ds.synth_dataset(300, 3)
    for name, values in ds.ATTRIBUTES.items():
        assert {s[name] for s in scenes.values()} == set(values)
    vocab = ds.build_vocabulary(records)
    assert len(vocab) == len(_grammar_terminals()) + len(ds.RESERVED)


def test_tokenize_examples(vocab32):
    v = ds.Vocabulary(["a", "man", "walks"])
    assert ds.tokenize("A man walks.", v) == [ds.SOS_ID, v.id("a"), v.id("man"), v.id("walks"), ds.EOS_ID]
    assert ds.tokenize("", v) == [ds.SOS_ID, ds.EOS_ID]
    assert ds.tokenize("a zebra", v) == [ds.SOS_ID, v.id("a"), ds.UNK_ID, ds.EOS_ID]


@given(st.lists(st.sampled_from(["a", "man", "walks", "dog", "sits"]), max_size=12))
def test_detokenize_inverts_tokenize(words):
    v = ds.Vocabulary(["a", "man", "walks"])
    ids = ds.tokenize(" ".join(words), v)
    expected = [w if w in v else "<unk>" for w in words]
    assert ds.detokenize(ids, v).split() == expected


# ----------------------------------------------------------------------------- synthetic corpus

def test_synth_is_deterministic():
    a = ds.synth_dataset(32, 7)
    b = ds.synth_dataset(32, 7)
    assert a[0] == b[0] and a[2] == b[2]
    for vid in a[1]:
        assert a[1][vid].visual.tobytes() == b[1][vid].visual.tobytes()
        assert a[1][vid].audio.tobytes() == b[1][vid].audio.tobytes()
    c = ds.synth_dataset(32, 8)
    assert c[0] != a[0]


def test_synth_records(synth32):
    records, features, scenes = synth32
    assert len(records) == 32 and len(features) == 32
    for rec in records:
        assert len(rec.qa_pairs) == ds.NUM_ROUNDS
        assert features[rec.video_id].visual.shape == (4, 49, 512)
    with pytest.raises(ValueError):
        ds.synth_dataset(0, 1)


def test_summary_mentions_an_answer_only_attribute(synth32):
    records, _, scenes = synth32
    frame_words = set(ds.ACTORS) | set(ds.ROOMS)
    for rec in records:
        summary = set(ds.split_words(rec.summary))
        answers = {w for a in rec.answers for w in ds.split_words(a)}
        hidden = (summary & answers) - frame_words
        assert hidden & (set(ds.ACTIONS) | set(ds.OBJECTS) | set(ds.SOUNDS))


def test_split_sizes():
    records, _, _ = ds.synth_dataset(10, 1, {"train": 6, "test": 4})
    assert [r.split for r in records] == ["train"] * 6 + ["test"] * 4
    with pytest.raises(ValueError):
        ds.synth_dataset(10, 1, {"train": 3})


def test_linear_probe_action_only_in_middle_frames():
    from sklearn.linear_model import LogisticRegression

    middle, ends, labels = [], [], []
    for seed in range(5):       # 5 x 200 samples, pooled per frame to keep memory small
        records, features, scenes = ds.synth_dataset(200, 100 + seed)
        for rec in records:
            v = features[rec.video_id].visual.mean(axis=1)
            middle.append(v[1:3].reshape(-1))
            ends.append(v[[0, 3]].reshape(-1))
            labels.append(ds.ACTIONS.index(scenes[rec.video_id]["action"]))
    middle, ends, labels = np.array(middle), np.array(ends), np.array(labels)
    train, test = slice(0, 800), slice(800, 1000)

    def accuracy(x):
        clf = LogisticRegression(max_iter=2000).fit(x[train], labels[train])
        return clf.score(x[test], labels[test])

    assert accuracy(middle) > 0.9
    assert accuracy(ends) < 1 / 6 + 0.1


# ----------------------------------------------------------------------------- batches

def test_pad_batch_widths(synth32, vocab32):
    records, features, _ = synth32
    recs = [
        ds.DialogueRecord("x", "one two three", records[0].qa_pairs, "s", "train"),
        ds.DialogueRecord("y", "one two three four five", records[1].qa_pairs, "s", "train"),
    ]
    feats = {"x": features[records[0].video_id], "y": features[records[1].video_id]}
    batch = ds.pad_batch(recs, feats, vocab32)
    assert batch.caption.shape == (2, 7)
    assert batch.caption_len.tolist() == [5, 7]
    assert (batch.caption[0, 5:] == ds.PAD_ID).all()

    one = ds.pad_batch(recs[:1], feats, vocab32)
    assert one.caption.shape == (1, 5)


def test_pad_batch_of_64(vocab32):
    records, features, _ = ds.synth_dataset(64, 11)
    batch = ds.pad_batch(records, features, vocab32, [3] * 64)
    for name in ("visual", "audio", "caption", "questions", "answers", "summary", "start_rounds"):
        assert getattr(batch, name).shape[0] == 64
    assert batch.questions.shape[:2] == (64, 10)


def test_pad_batch_missing_feature(synth32, vocab32):
    records, _, _ = synth32
    with pytest.raises(ds.MissingFeatureError, match=records[0].video_id):
        ds.pad_batch(records[:1], {}, vocab32)


def test_corpus_round_trip(tmp_path):
    records, features, _ = ds.synth_dataset(6, 2, {"train": 4, "test": 2})
    ds.write_corpus(tmp_path, records, features, ds.build_vocabulary(records))
    splits, store = ds.load_corpus(tmp_path)
    assert splits["train"] + splits["test"] == records
    assert len(store) == 6
    for r in records:
        assert store[r.video_id].visual.tobytes() == features[r.video_id].visual.tobytes()
