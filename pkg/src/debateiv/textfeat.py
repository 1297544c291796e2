"""Text preprocessing and TF-IDF features for the nuisance networks.

Pipeline: :func:`preprocess` (strip links, markup, numbers, punctuation and
pronouns; lower-case; stem) -> :func:`build_vocabulary` (document-share
filter) -> :func:`tfidf` (raw counts times smoothed idf, unit-norm rows) ->
:func:`assemble_inputs` (text block followed by a one-hot opinion block).
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError
from .stemmer import stem_fixed

PRONOUN_LIST_VERSION = "1"
PRONOUNS = frozenset("""
i me my mine myself we us our ours ourselves
you your yours yourself yourselves thou thee thy thine
he him his himself she her hers herself it its itself
they them their theirs themselves themself
one oneself this that these those
who whom whose which what whoever whomever whichever whatever
anybody anyone anything everybody everyone everything
nobody noone nothing somebody someone something
each either neither another other others
""".split())

URL_PATTERN = re.compile(r"(?:https?://|ftp://|www\.)\S+|\S+\.(?:com|org|net|edu|gov|io)(?:/\S*)?\b", re.I)
ENTITY_PATTERN = re.compile(r"&#?\w+;")
# markdown-like formatting symbols; everything else non-alphabetic is dropped
# later as punctuation, this list only goes into the metadata
MARKUP_SYMBOLS = ("*", "_", "~", "`", "#", ">", "|", "^", "[", "]", "(", ")", "&gt;", "&lt;", "&amp;", "&nbsp;")
WORD_PATTERN = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)*")
CLITICS = ("'s", "'m", "'re", "'ve", "'ll", "'d")
TFIDF_FORMULA = "tf=raw count; idf=ln((1+N)/(1+df))+1; rows scaled to unit L2 norm"


def _clean_token(token: str) -> str:
    token = token.replace("’", "'")
    for clitic in CLITICS:
        if token.endswith(clitic):
            token = token[: -len(clitic)]
            break
    return token.replace("'", "")


def preprocess(text: str) -> list[str]:
    """Tokenize one response into stems.

    >>> preprocess("Economically, economics wins! http://x.y 42")
    ['econom', 'econom', 'win']
    """
    if not text:
        return []
    text = URL_PATTERN.sub(" ", text)
    text = ENTITY_PATTERN.sub(" ", text)
    out = []
    for chunk in text.lower().split():
        if any(ch.isdigit() for ch in chunk):
            continue
        for raw in WORD_PATTERN.findall(chunk.replace("’", "'")):
            word = _clean_token(raw)
            if not word or word in PRONOUNS:
                continue
            stemmed = stem_fixed(word)
            if stemmed and stemmed not in PRONOUNS:
                out.append(stemmed)
    return out


@dataclass(frozen=True)
class Vocabulary:
    terms: tuple[str, ...]
    document_frequency: tuple[int, ...]
    n_documents: int
    min_df: float
    max_df: float

    def __len__(self) -> int:
        return len(self.terms)

    def index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.terms)}

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.terms))

    @classmethod
    def load(cls, path: str | Path, meta: dict | None = None) -> "Vocabulary":
        terms = tuple(Path(path).read_text().splitlines())
        meta = meta or {}
        return cls(terms=terms,
                   document_frequency=tuple(meta.get("document_frequency", [0] * len(terms))),
                   n_documents=int(meta.get("n_documents", 0)),
                   min_df=float(meta.get("min_df", 0.0)), max_df=float(meta.get("max_df", 1.0)))


def build_vocabulary(corpus: Sequence[Sequence[str]], min_df: float = 0.001,
                     max_df: float = 0.999) -> Vocabulary:
    """Keep stems whose share of documents lies in ``[min_df, max_df]``.

    ``corpus`` is a sequence of token lists as produced by :func:`preprocess`.
    """
    n = len(corpus)
    if n == 0:
        raise ConfigurationError("empty corpus")
    df: dict[str, int] = {}
    for doc in corpus:
        for term in set(doc):
            df[term] = df.get(term, 0) + 1
    keep = sorted(t for t, c in df.items() if min_df <= c / n <= max_df)
    if not keep:
        raise ConfigurationError(
            f"vocabulary is empty after filtering with min_df={min_df}, max_df={max_df}")
    return Vocabulary(terms=tuple(keep), document_frequency=tuple(df[t] for t in keep),
                      n_documents=n, min_df=min_df, max_df=max_df)


def tfidf(corpus: Sequence[Sequence[str]], vocab: Vocabulary) -> sp.csr_matrix:
    """Document-by-term TF-IDF matrix with unit-norm rows (zero rows stay zero).

    The idf uses the document frequencies of ``corpus`` itself.
    """
    index = vocab.index()
    n = len(corpus)
    rows, cols, vals = [], [], []
    for r, doc in enumerate(corpus):
        counts: dict[int, int] = {}
        for term in doc:
            j = index.get(term)
            if j is not None:
                counts[j] = counts.get(j, 0) + 1
        for j in sorted(counts):
            rows.append(r)
            cols.append(j)
            vals.append(float(counts[j]))
    counts_mat = sp.csr_matrix((vals, (rows, cols)), shape=(n, len(vocab)), dtype=float)
    df = np.diff(counts_mat.tocsc().indptr)
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    mat = counts_mat @ sp.diags(idf)
    mat = sp.csr_matrix(mat)
    norms = np.sqrt(np.asarray(mat.multiply(mat).sum(axis=1)).ravel())
    scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    mat = sp.csr_matrix(sp.diags(scale) @ mat)
    mat.eliminate_zeros()
    mat.sort_indices()
    return mat


def assemble_input(tfidf_row, opinion_index: int, n_opinions: int) -> sp.csr_matrix:
    """One network input row: TF-IDF block then one-hot opinion block."""
    if not 0 <= opinion_index < n_opinions:
        raise IndexError(f"opinion index {opinion_index} outside [0, {n_opinions})")
    row = sp.csr_matrix(tfidf_row)
    if row.shape[0] != 1:
        raise ValueError("expected a single row")
    indicator = sp.csr_matrix(([1.0], ([0], [opinion_index])), shape=(1, n_opinions))
    return sp.hstack([row, indicator], format="csr")


def assemble_inputs(matrix: sp.spmatrix, opinion_codes: Sequence[int],
                    n_opinions: int | None = None) -> sp.csr_matrix:
    """Stack :func:`assemble_input` over all rows."""
    codes = np.asarray(opinion_codes, dtype=np.int64)
    if n_opinions is None:
        n_opinions = int(codes.max()) + 1 if codes.size else 0
    if codes.size and (codes.min() < 0 or codes.max() >= n_opinions):
        raise IndexError("opinion code out of range")
    indicator = sp.csr_matrix((np.ones(codes.size), (np.arange(codes.size), codes)),
                              shape=(codes.size, n_opinions))
    return sp.hstack([sp.csr_matrix(matrix), indicator], format="csr")


@dataclass
class TextFeatures:
    vocab: Vocabulary
    matrix: sp.csr_matrix
    corpus_hash: str

    def metadata(self) -> dict:
        return {
            "formula": TFIDF_FORMULA,
            "min_df": self.vocab.min_df,
            "max_df": self.vocab.max_df,
            "n_documents": self.vocab.n_documents,
            "vocabulary_size": len(self.vocab),
            "document_frequency": list(self.vocab.document_frequency),
            "corpus_hash": self.corpus_hash,
            "pronoun_list_version": PRONOUN_LIST_VERSION,
            "markup_symbols": list(MARKUP_SYMBOLS),
            "stemmer": "porter-1980, iterated to a fixed point",
        }


def corpus_hash(texts: Iterable[str]) -> str:
    h = hashlib.sha256()
    for t in texts:
        h.update(t.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def featurize(texts: Sequence[str], min_df: float = 0.001, max_df: float = 0.999) -> TextFeatures:
    tokens = [preprocess(t) for t in texts]
    vocab = build_vocabulary(tokens, min_df=min_df, max_df=max_df)
    return TextFeatures(vocab=vocab, matrix=tfidf(tokens, vocab), corpus_hash=corpus_hash(texts))


def save_features(features: TextFeatures, out_dir: str | Path) -> None:
    """Write ``vocab.txt``, ``tfidf.csv`` (row,col,value triplets) and ``tfidf_meta.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    features.vocab.save(out_dir / "vocab.txt")
    coo = features.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(out_dir / "tfidf.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "col", "value"])
        for i in order:
            writer.writerow([int(coo.row[i]), int(coo.col[i]), repr(float(coo.data[i]))])
    meta = features.metadata()
    meta["n_rows"] = int(features.matrix.shape[0])
    (out_dir / "tfidf_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_features(out_dir: str | Path) -> TextFeatures:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "tfidf_meta.json").read_text())
    vocab = Vocabulary.load(out_dir / "vocab.txt", meta)
    rows, cols, vals = [], [], []
    with open(out_dir / "tfidf.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(int(rec["row"]))
            cols.append(int(rec["col"]))
            vals.append(float(rec["value"]))
    matrix = sp.csr_matrix((vals, (rows, cols)), shape=(meta["n_rows"], len(vocab)))
    return TextFeatures(vocab=vocab, matrix=matrix, corpus_hash=meta["corpus_hash"])


def idf_weights(n_documents: int, document_frequency: np.ndarray) -> np.ndarray:
    df = np.asarray(document_frequency, dtype=float)
    return np.log((1.0 + n_documents) / (1.0 + df)) + 1.0
