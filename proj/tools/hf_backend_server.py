#!/usr/bin/env python3
"""Serves a Hugging Face causal LM over the precot backend protocol.

    python tools/hf_backend_server.py --model google/gemma-2-2b-it --port 8765

Endpoints (JSON): GET /info, POST /capture, POST /generate, POST /unembed.
Activations are the residual stream after decoder block l (hidden_states[l + 1]).
Prompts are wrapped in the model's chat template as user content; t0 is the
token covering the final colon of the last "Let's think step by step:" in the
rendered text, found by offset alignment. Steering adds alpha * direction to
the block-l output at every decoded position after the prompt.
"""

import argparse
import json
from http.server import BaseHTTPRequestHandler, HTTPServer

import torch
from transformers import AutoModelForCausalLM, AutoTokenizer

PREAMBLE = "Let's think step by step:"


class ApiError(Exception):
    def __init__(self, status, kind, message, **extra):
        super().__init__(message)
        self.status, self.kind, self.extra = status, kind, extra


class Model:
    def __init__(self, name, device, dtype, chat_template):
        self.name = name
        self.tok = AutoTokenizer.from_pretrained(name)
        self.model = AutoModelForCausalLM.from_pretrained(name, torch_dtype=getattr(torch, dtype)).to(device)
        self.model.eval()
        self.device = device
        self.chat_template = chat_template and self.tok.chat_template is not None
        self.blocks = self.model.model.layers
        self.context_limit = int(getattr(self.model.config, "max_position_embeddings", 8192))

    def info(self):
        return {
            "name": self.name,
            "num_layers": len(self.blocks),
            "hidden_dim": int(self.model.config.hidden_size),
            "supports_unembedding": True,
            "context_limit": self.context_limit,
        }

    def render(self, prompt):
        if not self.chat_template:
            return prompt
        return self.tok.apply_chat_template(
            [{"role": "user", "content": prompt}], tokenize=False, add_generation_prompt=True
        )

    def encode(self, prompt):
        text = self.render(prompt)
        enc = self.tok(text, return_tensors="pt", return_offsets_mapping=True, add_special_tokens=not self.chat_template)
        return text, enc

    def locate_t0(self, text, offsets):
        pos = text.rfind(PREAMBLE)
        if pos < 0:
            raise ApiError(422, "t0_mismatch", "prompt does not contain the CoT preamble")
        colon = pos + len(PREAMBLE) - 1
        for i, (start, end) in enumerate(offsets):
            if start <= colon < end:
                if text[end:].strip() and not self.chat_template:
                    raise ApiError(422, "t0_mismatch", "text follows the preamble colon")
                return i
        raise ApiError(422, "t0_mismatch", "no token covers the preamble colon")

    @torch.no_grad()
    def capture(self, prompt, layers):
        text, enc = self.encode(prompt)
        t0 = self.locate_t0(text, enc["offset_mapping"][0].tolist())
        out = self.model(input_ids=enc["input_ids"].to(self.device), output_hidden_states=True)
        acts = {}
        for l in layers:
            if not 0 <= l < len(self.blocks):
                raise ApiError(400, "config", f"layer {l} outside range")
            acts[str(l)] = {"position": t0, "values": out.hidden_states[l + 1][0, t0].float().tolist()}
        return {"activations": acts}

    @torch.no_grad()
    def generate(self, prompt, params, steering):
        text, enc = self.encode(prompt)
        ids = enc["input_ids"].to(self.device)
        n_prompt = ids.shape[1]
        max_new = int(params["max_new_tokens"])
        if n_prompt + max_new > self.context_limit:
            raise ApiError(413, "context_overflow", "context overflow", prompt_tokens=n_prompt,
                           requested_new=max_new, context_limit=self.context_limit)
        handle = None
        if steering is not None:
            layer = int(steering["layer"])
            edit = float(steering["alpha"]) * torch.tensor(steering["direction"], device=self.device)

            def hook(_module, _inputs, output):
                hidden = output[0] if isinstance(output, tuple) else output
                # With the KV cache only the prompt pass has length > 1; decoded
                # positions arrive one at a time and are the ones edited.
                if hidden.shape[1] == 1:
                    hidden = hidden + edit.to(hidden.dtype)
                    return (hidden,) + tuple(output[1:]) if isinstance(output, tuple) else hidden
                return output

            handle = self.blocks[layer].register_forward_hook(hook)
        try:
            temperature = float(params["temperature"])
            torch.manual_seed(int(params.get("rng_seed", 0)) % (2**63))
            kwargs = {"max_new_tokens": max_new, "pad_token_id": self.tok.eos_token_id}
            if temperature > 0:
                kwargs.update(do_sample=True, temperature=temperature, top_k=0, top_p=1.0)
            else:
                kwargs.update(do_sample=False)
            seq = self.model.generate(input_ids=ids, attention_mask=torch.ones_like(ids), **kwargs)[0, n_prompt:]
        finally:
            if handle is not None:
                handle.remove()
        new = seq.tolist()
        finish = "length" if len(new) >= max_new else "stop"
        return {
            "text": self.tok.decode(new, skip_special_tokens=True),
            "tokens": [self.tok.decode([t]) for t in new],
            "prompt_tokens": n_prompt,
            "finish_reason": finish,
        }

    @torch.no_grad()
    def unembed(self, vector, top_k):
        w = self.model.get_output_embeddings().weight
        v = torch.tensor(vector, device=w.device, dtype=w.dtype)
        logits = (w @ v).float()
        order = torch.argsort(logits, descending=True)
        if top_k:
            order = order[:top_k]
        return {"logits": [[self.tok.convert_ids_to_tokens(int(i)), float(logits[i])] for i in order]}


def make_handler(model):
    class Handler(BaseHTTPRequestHandler):
        def reply(self, status, body):
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def run(self, fn):
            try:
                self.reply(200, fn())
            except ApiError as e:
                self.reply(e.status, {"error": {"kind": e.kind, "message": str(e), **e.extra}})
            except (KeyError, ValueError, TypeError) as e:
                self.reply(400, {"error": {"kind": "config", "message": f"malformed request: {e}"}})
            except Exception as e:  # noqa: BLE001 - reported to the client as an internal error
                self.reply(500, {"error": {"kind": "internal", "message": str(e)}})

        def do_GET(self):
            if self.path == "/info":
                self.run(model.info)
            else:
                self.reply(404, {"error": {"kind": "config", "message": "unknown endpoint"}})

        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))) or b"{}")
            routes = {
                "/capture": lambda: model.capture(body["prompt"], body["layers"]),
                "/generate": lambda: model.generate(body["prompt"], body["params"], body.get("steering")),
                "/unembed": lambda: model.unembed(body["vector"], int(body.get("top_k", 0))),
            }
            if self.path in routes:
                self.run(routes[self.path])
            else:
                self.reply(404, {"error": {"kind": "config", "message": "unknown endpoint"}})

        def log_message(self, *_):
            pass

    return Handler


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", required=True)
    ap.add_argument("--device", default="cuda" if torch.cuda.is_available() else "cpu")
    ap.add_argument("--dtype", default="bfloat16")
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--no-chat-template", action="store_true")
    args = ap.parse_args()
    model = Model(args.model, args.device, args.dtype, not args.no_chat_template)
    # One request at a time: the server is single-threaded.
    HTTPServer((args.host, args.port), make_handler(model)).serve_forever()


if __name__ == "__main__":
    main()
