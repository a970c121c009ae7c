import math

import pytest

from core.error_handler import ArtifactVersionError, InvalidInputError
from tools.text_features import CONTENT_FEATURES, Bm25Params, Corpus, content_features, feature_rows, tokenize


@pytest.fixture
def toy_corpus():
    return Corpus.from_texts({"d1": "a b", "d2": "a c", "d3": "b c"})


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize("Fraud, loan fraud.") == ["fraud", "loan", "fraud"]

    def test_cjk_bigrams(self):
        assert tokenize("詐騙罪") == ["詐騙", "騙罪"]

    def test_cjk_without_bigrams(self):
        assert tokenize("詐騙罪", cjk_bigrams=False) == ["詐騙罪"]

    def test_mixed_script(self):
        assert tokenize("刑法 art266") == ["刑法", "art266"]

    def test_single_cjk_char(self):
        assert tokenize("罪") == ["罪"]

    def test_empty(self):
        assert tokenize("  ,. ") == []


class TestContentFeatures:
    def test_matching_document(self, toy_corpus):
        features = content_features(["a", "b"], "d1", toy_corpus)
        assert list(features) == list(CONTENT_FEATURES)
        assert features["avg_tf"] == pytest.approx(1.0)
        assert features["avg_idf"] == pytest.approx(0.4054651081081644)
        assert features["avg_tfidf"] == pytest.approx(0.4054651081081644)
        assert features["bm25"] == pytest.approx(0.9400072584914713)
        assert features["tfidf_cosine"] == pytest.approx(1.0)

    def test_partial_match(self, toy_corpus):
        features = content_features(["a", "b"], "d2", toy_corpus)
        assert features["avg_tf"] == pytest.approx(0.5)
        assert features["bm25"] == pytest.approx(math.log(1.6))
        assert 0.0 < features["tfidf_cosine"] < 1.0

    def test_unseen_term_idf_smoothing(self, toy_corpus):
        features = content_features(["zzz"], "d1", toy_corpus)
        assert features["avg_idf"] == pytest.approx(math.log(4))
        assert features["avg_tf"] == 0.0
        assert features["bm25"] == 0.0
        assert features["tfidf_cosine"] == 0.0

    def test_bm25_without_length_normalization(self):
        corpus = Corpus.from_texts({"d1": "a a b c", "d2": "c"})
        features = content_features(["a"], "d1", corpus, Bm25Params(k1=1.2, b=0.0))
        idf = math.log(1.0 + 1.5 / 1.5)
        assert features["bm25"] == pytest.approx(idf * 2 * 2.2 / (2 + 1.2))

    def test_empty_query(self, toy_corpus):
        with pytest.raises(InvalidInputError):
            content_features([], "d1", toy_corpus)

    def test_unknown_document(self, toy_corpus):
        with pytest.raises(InvalidInputError):
            content_features(["a"], "d9", toy_corpus)

    def test_feature_rows_follow_column_order(self, toy_corpus):
        rows = feature_rows(["a", "b"], ["d1", "d3"], toy_corpus)
        assert len(rows) == 2
        assert rows[0][0] == pytest.approx(1.0)
        assert rows[1][0] == pytest.approx(0.5)


class TestCorpus:
    def test_duplicate_document(self):
        corpus = Corpus()
        corpus.add_text("d1", "a")
        with pytest.raises(InvalidInputError):
            corpus.add_text("d1", "b")

    def test_frozen_rejects_writes(self, toy_corpus):
        with pytest.raises(InvalidInputError):
            toy_corpus.add_text("d4", "a")

    def test_saved_index_gives_same_features(self, toy_corpus, tmp_path):
        path = tmp_path / "corpus.json"
        toy_corpus.save(path)
        loaded = Corpus.load(path)
        assert loaded.n_documents == 3
        assert content_features(["a", "b"], "d2", loaded) == pytest.approx(
            content_features(["a", "b"], "d2", toy_corpus))

    def test_version_mismatch(self, toy_corpus, tmp_path):
        path = tmp_path / "corpus.json"
        toy_corpus.save(path)
        path.write_text(path.read_text(encoding="utf-8").replace('"format_version": 1', '"format_version": 2'),
                        encoding="utf-8")
        with pytest.raises(ArtifactVersionError):
            Corpus.load(path)

    def test_load_jsonl(self, tmp_path):
        path = tmp_path / "docs.jsonl"
        path.write_text('{"doc_id": "d1", "text": "Loan fraud"}\n{"doc_id": "d2", "text": "theft"}\n',
                        encoding="utf-8")
        corpus = Corpus.load_jsonl(path)
        assert corpus.tf("fraud", "d1") == 1
        assert corpus.avg_dl == pytest.approx(1.5)
