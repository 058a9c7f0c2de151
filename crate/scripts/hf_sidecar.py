#!/usr/bin/env python3
"""Serve a Hugging Face encoder over the denseig external backend protocol.

Reads one JSON request per line on stdin and answers one JSON object per line
on stdout. Point a run config at it with

    backend.kind = external
    backend.command = python3 scripts/hf_sidecar.py --model GPL/trec-covid-msmarco-distilbert-gpl
"""

import argparse
import hashlib
import json
import sys

import torch
from transformers import AutoModel, AutoTokenizer


def parse_args():
    p = argparse.ArgumentParser()
    p.add_argument("--model", required=True, help="hub id or local directory")
    p.add_argument("--max-seq-len", type=int, default=350)
    p.add_argument("--dtype", choices=["float64", "float32"], default="float64")
    p.add_argument(
        "--pooling",
        choices=["content", "attended"],
        default="content",
        help="content: mean over non-special attended tokens; attended: mean over all attended tokens",
    )
    return p.parse_args()


class Sidecar:
    def __init__(self, args):
        self.dtype = getattr(torch, args.dtype)
        self.tokenizer = AutoTokenizer.from_pretrained(args.model)
        self.model = AutoModel.from_pretrained(args.model).to(self.dtype).eval()
        self.max_seq_len = min(args.max_seq_len, self.model.config.max_position_embeddings)
        self.pooling = args.pooling
        self.fingerprint = self._fingerprint(args)

    def _fingerprint(self, args):
        h = hashlib.sha256()
        for name, tensor in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().to(torch.float64).cpu().numpy().tobytes())
        h.update(f"{args.dtype}:{args.pooling}:{self.max_seq_len}".encode())
        return "hf-" + h.hexdigest()[:16]

    def info(self, _req):
        t = self.tokenizer
        return {
            "fingerprint": self.fingerprint,
            "dim": self.model.config.hidden_size if hasattr(self.model.config, "hidden_size") else self.model.config.dim,
            "max_seq_len": self.max_seq_len,
            "cls_id": t.cls_token_id,
            "sep_id": t.sep_token_id,
            "pad_id": t.pad_token_id,
        }

    def tokenize(self, req):
        enc = self.tokenizer(req["text"], truncation=True, max_length=self.max_seq_len)
        ids = enc["input_ids"]
        special = self.tokenizer.get_special_tokens_mask(ids, already_has_special_tokens=True)
        return {
            "token_ids": ids,
            "tokens": self.tokenizer.convert_ids_to_tokens(ids),
            "special_mask": [bool(s) for s in special],
            "attention_mask": [bool(a) for a in enc["attention_mask"]],
        }

    def embed(self, req):
        ids = torch.tensor([req["token_ids"]])
        with torch.no_grad():
            x = self.model.get_input_embeddings()(ids)[0]
        return {"embeddings": x.tolist()}

    def _pool(self, x, req):
        attn = torch.tensor(req["attention_mask"], dtype=torch.bool)
        out = self.model(inputs_embeds=x.unsqueeze(0), attention_mask=attn.long().unsqueeze(0)).last_hidden_state[0]
        keep = attn.clone()
        if self.pooling == "content":
            keep &= ~torch.tensor(req["special_mask"], dtype=torch.bool)
        if not keep.any():
            raise ValueError("no positions to pool")
        return out[keep].mean(dim=0)

    def forward_pooled(self, req):
        x = torch.tensor(req["embeddings"], dtype=self.dtype)
        with torch.no_grad():
            return {"pooled": self._pool(x, req).tolist()}

    def gradient(self, req):
        fixed = torch.tensor(req["fixed"], dtype=self.dtype)
        grads = []
        for point in req["points"]:
            x = torch.tensor(point, dtype=self.dtype, requires_grad=True)
            score = self._pool(x, req) @ fixed
            (g,) = torch.autograd.grad(score, x)
            grads.append(g.tolist())
        return {"gradients": grads}

    def encode(self, req):
        tok = self.tokenize(req)
        x = torch.tensor(self.embed(tok)["embeddings"], dtype=self.dtype)
        with torch.no_grad():
            return {"pooled": self._pool(x, tok).tolist()}


def main():
    args = parse_args()
    sidecar = Sidecar(args)
    ops = {
        "info": sidecar.info,
        "tokenize": sidecar.tokenize,
        "embed": sidecar.embed,
        "forward_pooled": sidecar.forward_pooled,
        "gradient": sidecar.gradient,
        "encode": sidecar.encode,
    }
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            op = ops.get(req.get("op"))
            reply = op(req) if op else {"error": f"unknown op {req.get('op')!r}"}
        except Exception as e:  # every failure goes back to the caller
            reply = {"error": f"{type(e).__name__}: {e}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()


if __name__ == "__main__":
    main()
