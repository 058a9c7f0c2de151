#!/usr/bin/env python3
"""Write a small randomly initialised DistilBERT and WordPiece tokenizer.

Useful for exercising the sidecar without downloading weights:

    python3 scripts/make_tiny_model.py /tmp/tiny --corpus corpus.jsonl --queries queries.jsonl
"""

import argparse
import json
import os
import re

import torch
from transformers import BertTokenizerFast, DistilBertConfig, DistilBertModel


def words(path, fields):
    out = set()
    with open(path) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                for k in fields:
                    out.update(re.findall(r"\w+", (rec.get(k) or "").lower()))
    return out


def main():
    p = argparse.ArgumentParser()
    p.add_argument("out")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    vocab = words(args.corpus, ["title", "text"])
    if args.queries:
        vocab |= words(args.queries, ["text"])
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"] + sorted(vocab)
    tokens += [c for c in "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~" if c not in tokens]

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "vocab.txt"), "w") as f:
        f.write("\n".join(tokens) + "\n")
    BertTokenizerFast(os.path.join(args.out, "vocab.txt"), do_lower_case=True).save_pretrained(args.out)

    torch.manual_seed(args.seed)
    cfg = DistilBertConfig(
        vocab_size=len(tokens),
        dim=args.dim,
        hidden_dim=2 * args.dim,
        n_layers=2,
        n_heads=2,
        max_position_embeddings=512,
    )
    DistilBertModel(cfg).save_pretrained(args.out)


if __name__ == "__main__":
    main()
