import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from meaningcap.data import CaptionRecord
from meaningcap.embeddings import (
    NOOBJ_ID,
    RESERVED,
    UNK_ID,
    Vocabulary,
    build_vocabulary,
    embed_token,
    import_pretrained,
    read_word_vectors,
)
from meaningcap.errors import FormatError, VocabularyError

CAPS = [CaptionRecord("v1", ("a", "dog", "runs")), CaptionRecord("v2", ("a", "cat", "runs"))]


class TestBuildVocabulary:
    def test_min_count_one(self):
        vocab = build_vocabulary(CAPS, 1)
        assert len(vocab) == 5 + 4
        assert vocab.id_to_token[:5] == list(RESERVED)

    def test_min_count_two_keeps_shared_words(self):
        vocab = build_vocabulary(CAPS, 2)
        assert len(vocab) == 7
        assert set(vocab.id_to_token[5:]) == {"a", "runs"}
        assert vocab.id("dog") == UNK_ID

    def test_min_count_three_keeps_nothing(self):
        assert len(build_vocabulary(CAPS, 3)) == 5

    def test_extra_tokens_always_kept(self):
        vocab = build_vocabulary(CAPS, 3, extra_tokens=["person", "dog"])
        assert "person" in vocab and "dog" in vocab

    def test_no_empty_token(self):
        assert "" not in build_vocabulary(CAPS, 1)

    def test_order_is_stable(self):
        assert build_vocabulary(CAPS, 1).id_to_token == build_vocabulary(list(reversed(CAPS)), 1).id_to_token


@given(st.lists(st.text(alphabet="abcdefg", min_size=1, max_size=5), min_size=1, max_size=30))
def test_id_token_round_trip(words):
    vocab = build_vocabulary([CaptionRecord("v", tuple(words))], 1)
    for i in range(len(vocab)):
        assert vocab.id(vocab.token(i)) == i


def test_vocab_save_load(tmp_path):
    vocab = build_vocabulary(CAPS, 1)
    vocab.save(tmp_path / "vocab.json")
    assert Vocabulary.load(tmp_path / "vocab.json").id_to_token == vocab.id_to_token


def test_out_of_range_id():
    with pytest.raises(VocabularyError):
        build_vocabulary(CAPS, 1).token(99)


class TestEmbedToken:
    vocab = build_vocabulary(CAPS, 1)
    E = torch.randn(300, len(vocab), generator=torch.Generator().manual_seed(0))

    def test_known_token_is_column(self):
        assert torch.equal(embed_token(self.vocab, self.E, "dog"), self.E[:, self.vocab.id("dog")])

    def test_unknown_uses_unk(self):
        assert torch.equal(embed_token(self.vocab, self.E, "zebra"), self.E[:, UNK_ID])

    def test_none_uses_noobj(self):
        assert torch.equal(embed_token(self.vocab, self.E, None), self.E[:, NOOBJ_ID])

    def test_matches_one_hot_product(self):
        for tok in self.vocab.id_to_token:
            onehot = torch.zeros(len(self.vocab))
            onehot[self.vocab.id(tok)] = 1
            torch.testing.assert_close(embed_token(self.vocab, self.E, tok), self.E @ onehot)


class TestImportPretrained:
    vocab = build_vocabulary(CAPS, 1)

    def test_pretrained_column_copied(self):
        vec = np.arange(300, dtype=np.float32) / 300
        E = import_pretrained(self.vocab, {"dog": vec, "zebra": vec})
        np.testing.assert_array_equal(E[:, self.vocab.id("dog")].numpy(), vec)

    def test_missing_columns_small_uniform(self):
        E = import_pretrained(self.vocab, {})
        assert E.shape == (300, len(self.vocab))
        assert float(E.abs().max()) <= 0.1

    def test_seeded(self):
        assert torch.equal(import_pretrained(self.vocab, {}, seed=3), import_pretrained(self.vocab, {}, seed=3))

    def test_wrong_length(self):
        with pytest.raises(FormatError):
            import_pretrained(self.vocab, {"dog": [0.0] * 299})


def test_read_word_vectors(tmp_path):
    path = tmp_path / "vec.txt"
    lines = ["3 4", "dog 1 2 3 4", "cat 0.5 0.5 0.5 0.5", "car -1 -1 -1 -1"]
    path.write_text("\n".join(lines) + "\n")
    vectors = read_word_vectors(path, d_emb=4, keep={"dog", "cat"})
    assert sorted(vectors) == ["cat", "dog"]
    np.testing.assert_array_equal(vectors["dog"], [1, 2, 3, 4])


def test_read_word_vectors_bad_width(tmp_path):
    path = tmp_path / "vec.txt"
    path.write_text("dog 1 2 3\n")
    with pytest.raises(FormatError, match="line 1"):
        read_word_vectors(path, d_emb=4)
