"""Synthetic parallel corpora for demos and tests.

The substitution-cipher pair maps each source token one-to-one onto a target
token (same order, same length), so a small model can learn the task exactly
while the two languages share no surface forms.
"""

from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from .data import ParallelCorpus, SentencePair


def make_cipher_corpus(n_pairs: int, vocab_size: int = 50, min_len: int = 3,
                       max_len: int = 10, seed: int = 0, cipher_seed: int = 12345,
                       source_lang: str = "src", target_lang: str = "tgt") -> ParallelCorpus:
    """Random sentences over ``vocab_size`` source words, ciphered per token.

    The token mapping depends only on ``cipher_seed``, so train and test
    splits drawn with different ``seed`` values share one language pair.
    """
    rng = np.random.default_rng(seed)
    cipher = np.random.default_rng(cipher_seed).permutation(vocab_size)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        word_ids = rng.integers(0, vocab_size, size=length)
        source = tuple(f"s{w:02d}" for w in word_ids)
        target = tuple(f"t{cipher[w]:02d}" for w in word_ids)
        pairs.append(SentencePair(source, target, source_lang, target_lang))
    return ParallelCorpus(pairs)


def make_identity_corpus(n_pairs: int, vocab_size: int = 30, min_len: int = 2,
                         max_len: int = 8, seed: int = 0) -> ParallelCorpus:
    """Copy task: target equals source; the easiest possible translation."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        tokens = tuple(f"w{w:02d}" for w in rng.integers(0, vocab_size, size=length))
        pairs.append(SentencePair(tokens, tokens))
    return ParallelCorpus(pairs)


def write_parallel_files(corpus: ParallelCorpus, source_path, target_path) -> None:
    Path(source_path).write_text(
        "\n".join(" ".join(p.source) for p in corpus) + "\n", encoding="utf-8")
    Path(target_path).write_text(
        "\n".join(" ".join(p.target) for p in corpus) + "\n", encoding="utf-8")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic cipher parallel corpus.")
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--pairs", type=int, default=2000)
    parser.add_argument("--test-pairs", type=int, default=200)
    parser.add_argument("--vocab-size", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    train = make_cipher_corpus(args.pairs, vocab_size=args.vocab_size, seed=args.seed)
    test = make_cipher_corpus(args.test_pairs, vocab_size=args.vocab_size, seed=args.seed + 1)
    write_parallel_files(train, args.out_dir / "train.src", args.out_dir / "train.tgt")
    write_parallel_files(test, args.out_dir / "test.src", args.out_dir / "test.tgt")
    print(f"wrote {len(train)} train and {len(test)} test pairs to {args.out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
