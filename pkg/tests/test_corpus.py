import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim import corpus
from fedsim.errors import ConfigError, RecordError, SchemaError


class TestTokenize:
    def test_empty(self):
        assert corpus.tokenize("") == []

    def test_simple_statement(self):
        assert corpus.tokenize("int a = b + 1;") == [
            "int", "a", "=", "b", "+", "1", ";",
        ]

    def test_line_comment_dropped_longest_match_op(self):
        assert corpus.tokenize("x>=y // c") == ["x", ">=", "y"]

    def test_block_comment_dropped(self):
        assert corpus.tokenize("a /* multi\nline */ b") == ["a", "b"]

    def test_string_literal_single_token(self):
        assert corpus.tokenize('printf("a b; c\\"d");') == [
            "printf", "(", '"a b; c\\"d"', ")", ";",
        ]

    def test_char_literal_single_token(self):
        assert corpus.tokenize("c = '\\n';") == ["c", "=", "'\\n'", ";"]

    def test_three_char_operators(self):
        assert corpus.tokenize("a <<= 2; b >>= 3;") == [
            "a", "<<=", "2", ";", "b", ">>=", "3", ";",
        ]

    def test_two_char_operators(self):
        assert corpus.tokenize("p->q++ == r && s || t != u") == [
            "p", "->", "q", "++", "==", "r", "&&", "s", "||", "t", "!=", "u",
        ]

    def test_numeric_literals(self):
        assert corpus.tokenize("0xFFul 3.14f 1e-9 .5 42L") == [
            "0xFFul", "3.14f", "1e-9", ".5", "42L",
        ]

    def test_varargs_ellipsis(self):
        assert corpus.tokenize("f(int n, ...)") == [
            "f", "(", "int", "n", ",", "...", ")",
        ]

    ident = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,6}", fullmatch=True)
    op = st.sampled_from(
        ["+", "-", "*", "/", "==", "!=", "<=", ">=", "<<", ">>", "&&",
         "||", "->", "++", "--", "<<=", ">>=", ";", ",", "(", ")", "{", "}"]
    )

    @given(st.lists(st.one_of(ident, op), min_size=1, max_size=30))
    @settings(max_examples=150, deadline=None)
    def test_idempotent_under_reserialization(self, tokens):
        """Joining tokens with spaces and re-lexing reproduces the stream."""
        once = corpus.tokenize(" ".join(tokens))
        twice = corpus.tokenize(" ".join(once))
        assert once == twice

    @given(st.text(max_size=200))
    @settings(max_examples=150, deadline=None)
    def test_deterministic(self, code):
        assert corpus.tokenize(code) == corpus.tokenize(code)


def _write_jsonl(tmp_path, lines, name="data.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


class TestLoadJsonl:
    def test_three_valid_lines(self, tmp_path):
        p = _write_jsonl(tmp_path, [
            json.dumps({"code": "int a;", "label": 0}),
            json.dumps({"code": "free(p); free(p);", "label": 1, "cwe": "CWE-415"}),
            json.dumps({"code": "x = y;", "label": "1", "project": "qemu"}),
        ])
        ds = corpus.load_jsonl(p)
        assert len(ds) == 3
        assert ds.samples[0].category == corpus.SECURE_CATEGORY
        assert ds.samples[1].category == "CWE-415"
        assert ds.samples[2].category == corpus.CWE_NONE
        assert ds.samples[2].project == "qemu"
        assert ds.samples[0].sample_id == "s000001"
        assert ds.samples[2].sample_id == "s000003"

    def test_label_two_is_schema_error(self, tmp_path):
        p = _write_jsonl(tmp_path, [json.dumps({"code": "x;", "label": "2"})])
        with pytest.raises(SchemaError, match="label"):
            corpus.load_jsonl(p)

    def test_bool_label_rejected(self, tmp_path):
        p = _write_jsonl(tmp_path, ['{"code": "x;", "label": true}'])
        with pytest.raises(SchemaError):
            corpus.load_jsonl(p)

    def test_blank_line_reports_line_number(self, tmp_path):
        p = _write_jsonl(tmp_path, [
            json.dumps({"code": "x;", "label": 0}), "",
            json.dumps({"code": "y;", "label": 0}),
        ])
        with pytest.raises(RecordError, match=r":2:"):
            corpus.load_jsonl(p)

    def test_invalid_json_reports_line_number(self, tmp_path):
        p = _write_jsonl(tmp_path, ['{"code": "x;", "label": 0}', "{nope"])
        with pytest.raises(RecordError, match=r":2:"):
            corpus.load_jsonl(p)

    def test_missing_field(self, tmp_path):
        p = _write_jsonl(tmp_path, [json.dumps({"label": 1})])
        with pytest.raises(RecordError, match="code"):
            corpus.load_jsonl(p)

    def test_nonstring_code(self, tmp_path):
        p = _write_jsonl(tmp_path, ['{"code": 5, "label": 0}'])
        with pytest.raises(RecordError):
            corpus.load_jsonl(p)

    def test_empty_code_rejected(self, tmp_path):
        p = _write_jsonl(tmp_path, [json.dumps({"code": "  ", "label": 0})])
        with pytest.raises(RecordError, match="token"):
            corpus.load_jsonl(p)

    def test_secure_with_cwe_rejected(self, tmp_path):
        p = _write_jsonl(tmp_path, [
            json.dumps({"code": "x;", "label": 0, "cwe": "CWE-79"})
        ])
        with pytest.raises(SchemaError):
            corpus.load_jsonl(p)

    def test_secure_sentinel_cwe_allowed(self, tmp_path):
        p = _write_jsonl(tmp_path, [
            json.dumps({"code": "x;", "label": 0, "cwe": "secure"})
        ])
        ds = corpus.load_jsonl(p)
        assert ds.samples[0].cwe is None

    def test_unknown_form_rejected(self, tmp_path):
        p = _write_jsonl(tmp_path, [json.dumps({"code": "x;", "label": 0})])
        with pytest.raises(ConfigError):
            corpus.load_jsonl(p, form="ast")

    def test_devign_scale_counts(self, tmp_path):
        """24,586 records, 11,273 vulnerable: counts preserved exactly."""
        n_total, n_vuln = 24586, 11273
        lines = []
        for i in range(n_total):
            label = 1 if i < n_vuln else 0
            rec = {"code": f"f_{i % 97}(x{i % 53});", "label": label}
            lines.append(json.dumps(rec))
        ds = corpus.load_jsonl(_write_jsonl(tmp_path, lines))
        assert len(ds) == n_total
        assert sum(s.label for s in ds.samples) == n_vuln
        assert ds.label_histogram[corpus.CWE_NONE] == n_vuln
        assert ds.label_histogram[corpus.SECURE_CATEGORY] == n_total - n_vuln


def _mk(sid, tokens, label, cwe=None):
    return corpus.DatasetSample(
        sample_id=sid, tokens=tuple(tokens), raw_form="source-code",
        label=label, cwe=cwe,
    )


class TestVocab:
    def test_two_distinct_tokens(self):
        ds = corpus.Dataset(samples=[_mk("s1", ["a", "b", "a"], 0)])
        v = corpus.build_vocab(ds, max_size=10)
        assert len(v) == 4
        assert v.id_to_token[:2] == [corpus.PAD_TOKEN, corpus.UNK_TOKEN]
        assert v.token_to_id["a"] == 2  # higher frequency
        assert v.token_to_id["b"] == 3

    def test_tie_breaks_lexicographically(self):
        ds = corpus.Dataset(samples=[_mk("s1", ["b", "a"], 0)])
        v = corpus.build_vocab(ds, max_size=10)
        assert v.token_to_id["a"] == 2
        assert v.token_to_id["b"] == 3

    def test_max_size_keeps_most_frequent(self):
        # 100 distinct tokens t000..t099, token tK appears K+1 times
        samples = []
        for k in range(100):
            samples.append(_mk(f"s{k}", [f"t{k:03d}"] * (k + 1), 0))
        ds = corpus.Dataset(samples=samples)
        v = corpus.build_vocab(ds, max_size=12)
        assert len(v) == 12
        kept = set(v.id_to_token[2:])
        assert kept == {f"t{k:03d}" for k in range(90, 100)}
        # most frequent gets the lowest content id
        assert v.token_to_id["t099"] == 2

    def test_encode_unknown_and_truncation(self):
        v = corpus.Vocab(id_to_token=[corpus.PAD_TOKEN, corpus.UNK_TOKEN, "a"],
                         max_size=8)
        assert v.encode(["a", "zz", "a", "a"], max_len=3) == [2, corpus.UNK_ID, 2]

    def test_round_trip_dict(self):
        v = corpus.Vocab(id_to_token=[corpus.PAD_TOKEN, corpus.UNK_TOKEN, "x"],
                         max_size=5)
        w = corpus.Vocab.from_dict(v.to_dict())
        assert w.id_to_token == v.id_to_token and w.max_size == v.max_size

    @given(st.lists(st.from_regex(r"[a-z]{1,4}", fullmatch=True),
                    min_size=1, max_size=50))
    @settings(max_examples=100, deadline=None)
    def test_encode_decode_round_trip(self, tokens):
        ds = corpus.Dataset(samples=[_mk("s1", tokens, 0)])
        v = corpus.build_vocab(ds, max_size=1000)
        assert v.decode(v.encode(tokens)) == tokens


class TestCleanMinCount:
    def test_boundary(self):
        samples = (
            [_mk(f"a{i}", ["x"], 1, "CWE-100") for i in range(100)]
            + [_mk(f"b{i}", ["x"], 1, "CWE-99") for i in range(99)]
            + [_mk(f"c{i}", ["x"], 0) for i in range(5)]
        )
        out = corpus.clean_min_count(corpus.Dataset(samples=samples), 100)
        hist = out.label_histogram
        assert hist["CWE-100"] == 100
        assert "CWE-99" not in hist
        assert hist[corpus.SECURE_CATEGORY] == 5

    def test_zero_is_identity(self):
        ds = corpus.Dataset(samples=[_mk("a", ["x"], 1, "CWE-1")])
        out = corpus.clean_min_count(ds, 0)
        assert out.samples == ds.samples

    def test_secure_always_survives(self):
        ds = corpus.Dataset(samples=[_mk("a", ["x"], 0)])
        out = corpus.clean_min_count(ds, 10**9)
        assert len(out) == 1

    def test_diversevul_shaped_retention(self):
        """Retention over the full published category histogram.

        29 vulnerable categories at their real counts (two sitting exactly
        on the 100 boundary) plus the secure mass survive; a 99-count
        category is dropped.  30 categories remain.
        """
        counts = {
            "CWE-20": 1315, "CWE-22": 140, "CWE-59": 165, "CWE-119": 1435,
            "CWE-120": 285, "CWE-125": 1635, "CWE-189": 275, "CWE-190": 675,
            "CWE-200": 715, "CWE-264": 215, "CWE-269": 110, "CWE-284": 285,
            "CWE-287": 105, "CWE-295": 100, "CWE-310": 345, "CWE-362": 400,
            "CWE-369": 160, "CWE-399": 460, "CWE-400": 395, "CWE-401": 195,
            "CWE-415": 245, "CWE-416": 1000, "CWE-476": 915, "CWE-617": 160,
            "CWE-703": 735, "CWE-772": 100, "CWE-787": 1380, "CWE-835": 110,
            "CWE-None": 2835,
        }
        n_secure = 330492
        tok = ("x",)
        samples = []
        sid = 0
        for cwe, n in counts.items():
            for _ in range(n):
                samples.append(corpus.DatasetSample(
                    sample_id=f"s{sid:07d}", tokens=tok,
                    raw_form="source-code", label=1, cwe=cwe))
                sid += 1
        for _ in range(99):  # the category that falls under the threshold
            samples.append(corpus.DatasetSample(
                sample_id=f"s{sid:07d}", tokens=tok,
                raw_form="source-code", label=1, cwe="CWE-79"))
            sid += 1
        for _ in range(n_secure):
            samples.append(corpus.DatasetSample(
                sample_id=f"s{sid:07d}", tokens=tok,
                raw_form="source-code", label=0))
            sid += 1

        out = corpus.clean_min_count(corpus.Dataset(samples=samples), 100)
        hist = out.label_histogram
        assert len(hist) == 30
        assert "CWE-79" not in hist
        assert hist[corpus.SECURE_CATEGORY] == n_secure
        assert hist["CWE-295"] == 100 and hist["CWE-772"] == 100
        for cwe, n in counts.items():
            assert hist[cwe] == n


class TestSplit:
    def _dataset(self, per_category):
        samples = []
        sid = 0
        for cat, n in per_category.items():
            for _ in range(n):
                label = 0 if cat == corpus.SECURE_CATEGORY else 1
                cwe = None if label == 0 else cat
                samples.append(_mk(f"s{sid:05d}", ["x"], label, cwe))
                sid += 1
        return corpus.Dataset(samples=samples)

    def test_single_category_floor(self):
        ds = self._dataset({"CWE-1": 10})
        train, test = corpus.split_train_test(ds, 0.8, seed=0)
        assert len(train) == 8 and len(test) == 2

    def test_same_seed_identical(self):
        ds = self._dataset({"CWE-1": 13, corpus.SECURE_CATEGORY: 7})
        a = corpus.split_train_test(ds, 0.8, seed=5)
        b = corpus.split_train_test(ds, 0.8, seed=5)
        assert [s.sample_id for s in a[0].samples] == [
            s.sample_id for s in b[0].samples
        ]

    def test_different_seed_differs(self):
        ds = self._dataset({"CWE-1": 40})
        a, _ = corpus.split_train_test(ds, 0.5, seed=1)
        b, _ = corpus.split_train_test(ds, 0.5, seed=2)
        assert [s.sample_id for s in a.samples] != [
            s.sample_id for s in b.samples
        ]

    def test_float_dust_guard(self):
        # 0.7 * 10 = 6.999999... must still floor to 7
        ds = self._dataset({"CWE-1": 10})
        train, _ = corpus.split_train_test(ds, 0.7, seed=0)
        assert len(train) == 7

    @given(
        st.dictionaries(
            st.sampled_from(["CWE-1", "CWE-2", "CWE-3", corpus.SECURE_CATEGORY]),
            st.integers(1, 40),
            min_size=1,
        ),
        st.sampled_from([0.5, 0.7, 0.8, 0.9]),
        st.integers(0, 1000),
    )
    @settings(max_examples=60, deadline=None)
    def test_partition_property(self, per_category, fraction, seed):
        """Disjoint cover with per-category floor counts."""
        ds = self._dataset(per_category)
        train, test = corpus.split_train_test(ds, fraction, seed)
        train_ids = {s.sample_id for s in train.samples}
        test_ids = {s.sample_id for s in test.samples}
        assert not train_ids & test_ids
        assert len(train_ids | test_ids) == len(ds)
        for cat, n in per_category.items():
            expected = int(math.floor(n * fraction + 1e-9))
            assert train.label_histogram.get(cat, 0) == expected
        # original order preserved on both sides
        assert [s.sample_id for s in train.samples] == sorted(
            s.sample_id for s in train.samples
        )


class TestManifest:
    def test_round_trip_and_determinism(self, tmp_path):
        ds = corpus.Dataset(samples=[
            _mk("s1", ["int", "a", ";"], 0),
            _mk("s2", ["free", "(", "p", ")", ";"], 1, "CWE-415"),
        ])
        vocab = corpus.build_vocab(ds, max_size=16)
        train, test = corpus.Dataset(samples=ds.samples[:1]), corpus.Dataset(
            samples=ds.samples[1:]
        )
        kwargs = dict(
            form="source-code", vocab=vocab, train=train, test=test,
            max_len=8, shards=[{"client_id": 0, "sample_ids": ["s1"]}],
            settings={"seed": 1},
        )
        p1, p2 = tmp_path / "m1.json", tmp_path / "m2.json"
        corpus.write_manifest(p1, **kwargs)
        corpus.write_manifest(p2, **kwargs)
        assert p1.read_bytes() == p2.read_bytes()

        prep = corpus.load_manifest(p1)
        assert prep.max_len == 8
        assert prep.vocab.id_to_token == vocab.id_to_token
        assert prep.train[0]["id"] == "s1"
        assert prep.test[0]["cwe"] == "CWE-415"
        assert prep.histograms["train"] == {"secure": 1}

    def test_version_check(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text('{"version": 99}', encoding="utf-8")
        with pytest.raises(SchemaError):
            corpus.load_manifest(p)

    def test_sample_arrays(self):
        recs = [
            {"id": "a", "ids": [2, 3], "label": 0, "cwe": None},
            {"id": "b", "ids": [4], "label": 1, "cwe": "CWE-20"},
            {"id": "c", "ids": [5], "label": 1, "cwe": None},
        ]
        ids, labels, cats = corpus.sample_arrays(recs, max_len=3)
        assert ids.shape == (3, 3)
        assert ids[0].tolist() == [2, 3, corpus.PAD_ID]
        assert labels.tolist() == [0, 1, 1]
        assert cats == [corpus.SECURE_CATEGORY, "CWE-20", corpus.CWE_NONE]
