import numpy as np
import pytest

from ltmlab import data
from ltmlab.data import CorpusError, build_vocab, decode, encode, load_corpus


class TestTokenize:
    def test_char_level_is_scalar_values(self):
        assert data.tokenize("ab\nc", "char") == ["a", "b", "\n", "c"]

    def test_word_level_marks_line_ends(self):
        assert data.tokenize("a b\nc d\n", "word") == \
            ["a", "b", "<eos>", "c", "d", "<eos>"]

    def test_word_level_without_trailing_newline(self):
        assert data.tokenize("x y x", "word") == ["x", "y", "x"]

    def test_unknown_level(self):
        with pytest.raises(ValueError):
            data.tokenize("a", "byte")


class TestVocab:
    def test_char_frequency_order(self):
        v = build_vocab("aab", "char")
        assert set(v.token_of) == {"<unk>", "a", "b"}
        assert v.id_of["a"] < v.id_of["b"]
        assert v.unk_id == 0

    def test_word_cap_folds_rare_tokens(self):
        v = build_vocab("x y x", "word", max_size=2)
        assert v.token_of == ["<unk>", "x"]
        ids = encode("x y x", v)
        assert list(ids) == [v.id_of["x"], v.unk_id, v.id_of["x"]]

    def test_tie_break_is_lexicographic(self):
        v = build_vocab("ba", "char")
        assert v.id_of["a"] < v.id_of["b"]

    def test_empty_text_rejected(self):
        with pytest.raises(CorpusError):
            build_vocab("", "char")

    def test_pretokenized_file_with_unk_hits_cap_exactly(self, tmp_path):
        # 10k-style setup: N-1 distinct words plus a literal <unk> in the text
        words = [f"w{i:05d}" for i in range(9999)]
        text = " ".join(words + ["<unk>"] * 50) + "\n"
        v = build_vocab(text, "word", max_size=10000)
        assert v.size == 10000
        assert v.token_of[0] == "<unk>"

    def test_ids_dense(self):
        v = build_vocab("the cat sat on the mat\n", "word")
        assert sorted(v.id_of.values()) == list(range(v.size))


class TestEncodeDecode:
    def test_empty_text(self):
        v = build_vocab("abc", "char")
        assert encode("", v).shape == (0,)

    def test_char_roundtrip_identity(self):
        v = build_vocab("hello world\n", "char")
        text = "world hello\n"
        assert decode(encode(text, v), v) == text

    def test_word_roundtrip_identity_on_normalized_text(self):
        v = build_vocab("the cat sat on the mat", "word")
        text = "the mat sat on the cat"
        assert decode(encode(text, v), v) == text

    def test_oov_maps_to_unk(self):
        v = build_vocab("aaa", "char")
        ids = encode("ab", v)
        assert ids[1] == v.unk_id

    def test_decode_rejects_out_of_range(self):
        v = build_vocab("ab", "char")
        with pytest.raises(ValueError):
            decode([v.size], v)

    def test_oov_count_matches_independent_tally(self, tiny_corpus_dir):
        corpus = load_corpus(tiny_corpus_dir, "word")
        valid_text = (tiny_corpus_dir / "valid.txt").read_text()
        train_text = (tiny_corpus_dir / "train.txt").read_text()
        # independent count with plain python sets
        train_words = set(data.tokenize(train_text, "word"))
        oov_expected = sum(1 for w in data.tokenize(valid_text, "word")
                           if w not in train_words)
        oov_encoded = int(np.sum(corpus.valid == corpus.vocab.unk_id))
        assert oov_encoded == oov_expected


class TestLoadCorpus:
    def test_loads_three_splits(self, tiny_corpus_dir):
        c = load_corpus(tiny_corpus_dir, "char")
        assert len(c.train) == 4000
        assert len(c.valid) == 800 and len(c.test) == 800
        assert c.train.dtype == np.int64
        assert int(max(c.train.max(), c.valid.max(), c.test.max())) < c.vocab.size

    def test_synthetic_token_counts(self, tmp_path):
        base = tmp_path / "c"
        base.mkdir()
        for name in ("train.txt", "valid.txt", "test.txt"):
            (base / name).write_text("a b c d e f g h i j\n")
        c = load_corpus(base, "word")
        # 10 words + eos per split
        assert len(c.train) == len(c.valid) == len(c.test) == 11

    def test_vocab_only_from_train(self, tmp_path):
        base = tmp_path / "c"
        base.mkdir()
        (base / "train.txt").write_text("a b\n")
        (base / "valid.txt").write_text("a z\n")
        (base / "test.txt").write_text("b q\n")
        c = load_corpus(base, "word")
        assert "z" not in c.vocab.id_of and "q" not in c.vocab.id_of
        assert c.valid[1] == c.vocab.unk_id

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path, "char")

    def test_bad_utf8_reports_offset(self, tmp_path):
        base = tmp_path / "c"
        base.mkdir()
        (base / "train.txt").write_bytes(b"ok\xffbad")
        (base / "valid.txt").write_text("a")
        (base / "test.txt").write_text("a")
        with pytest.raises(CorpusError, match="byte offset 2"):
            load_corpus(base, "char")

    def test_deterministic(self, tiny_corpus_dir):
        a = load_corpus(tiny_corpus_dir, "char")
        b = load_corpus(tiny_corpus_dir, "char")
        assert a.vocab.token_of == b.vocab.token_of
        assert np.array_equal(a.train, b.train)
        assert a.content_hash == b.content_hash

    def test_hash_changes_with_any_byte(self, tiny_corpus_dir):
        before = load_corpus(tiny_corpus_dir, "char").content_hash
        p = tiny_corpus_dir / "test.txt"
        raw = p.read_bytes()
        p.write_bytes(raw[:-1] + (b"." if raw[-1:] != b"." else b","))
        after = load_corpus(tiny_corpus_dir, "char").content_hash
        assert before != after

    def test_bundled_corpus_loads(self):
        c = load_corpus(data.desk_corpus_dir(), "char")
        assert c.vocab.size > 10
        assert len(c.train) > 50_000
