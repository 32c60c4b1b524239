#!/usr/bin/env python3
"""Regenerates the test fixtures under crates/core/tests/fixtures.

Produces:
  corpora/       synthetic CoQA-, QuAC-, CondaQA-like and generic JSONL slices
  tiny-llama/    random 3-layer Llama checkpoint (f32, llama3 rope scaling)
  tiny-qwen2/    random 2-layer Qwen2 checkpoint (bf16, qkv bias, tied head)
  */golden.json  reference block outputs, logit-lens log-probs and greedy
                 continuations computed with `transformers`

Everything is seeded; rerunning yields identical files.
"""

import json
import random
from pathlib import Path

import torch
from tokenizers import Tokenizer, decoders, models, pre_tokenizers, trainers

ROOT = Path(__file__).resolve().parent.parent
FIX = ROOT / "crates" / "core" / "tests" / "fixtures"

NAMES = ["Mara", "Tobias", "Ines", "Oskar", "Lena", "Felix", "Nora", "Jonas",
         "Clara", "Emil", "Ada", "Victor", "Hanna", "Paul", "Selma", "Arvid"]
TOWNS = ["Ashford", "Brindle", "Carrow", "Dunmore", "Elstow", "Fenwick",
         "Garside", "Holloway", "Ivybridge", "Kelso"]
PETS = ["dog", "cat", "parrot", "rabbit", "goat", "pony"]
COLORS = ["red", "blue", "green", "yellow", "brown", "white"]
JOBS = ["baker", "teacher", "carpenter", "nurse", "fisher", "painter"]
FOODS = ["apple pie", "fish soup", "bread", "cheese", "plum cake", "rice"]
FILLER = [
    "The weather that season was mild and the roads were quiet.",
    "Most evenings the neighbours gathered near the old stone bridge.",
    "The market opened early on Saturdays and closed before noon.",
    "A narrow river ran along the edge of the fields.",
    "Children from the village walked to school together every morning.",
    "In winter the hills turned white and the paths became slippery.",
    "The library kept a small collection of maps and old letters.",
    "Travellers often stopped at the inn to rest their horses.",
    "Everyone agreed that the summer festival was the best in years.",
    "The bell in the square rang twice each hour.",
    "Along the main street there were shops selling tools and cloth.",
    "Some families had lived in the valley for many generations.",
]


def story(rng, target_words):
    name = rng.choice(NAMES)
    facts = {
        "name": name,
        "town": rng.choice(TOWNS),
        "pet": rng.choice(PETS),
        "color": rng.choice(COLORS),
        "job": rng.choice(JOBS),
        "food": rng.choice(FOODS),
        "age": rng.randint(7, 70),
    }
    core = [
        f"{name} lived in the town of {facts['town']}.",
        f"{name} worked as a {facts['job']} near the harbour.",
        f"Every morning {name} walked a {facts['color']} {facts['pet']} along the river.",
        f"On Sundays {name} liked to eat {facts['food']} with friends.",
        f"{name} was {facts['age']} years old when this story took place.",
    ]
    sentences = list(core)
    while sum(len(s.split()) for s in sentences) < target_words:
        sentences.insert(rng.randint(1, len(sentences)), rng.choice(FILLER))
    return " ".join(sentences), facts


ANSWERABLE = [
    ("Where did {name} live?", "town"),
    ("What was {name}'s job?", "job"),
    ("What animal did {name} walk?", "pet"),
    ("What did {name} eat on Sundays?", "food"),
    ("How old was {name}?", "age"),
    ("What color was the {pet}?", "color"),
]
UNANSWERABLE = [
    "What was the name of {name}'s sister?",
    "Which school did {name} attend?",
    "What was the name of the {pet}?",
    "How much money did {name} earn?",
    "What instrument did {name} play?",
    "Who built the bridge?",
]


def qa_pairs(rng, facts, n):
    out = []
    for i in range(n):
        if i % 2 == 0:
            tmpl, key = rng.choice(ANSWERABLE)
            out.append((tmpl.format(**facts), str(facts[key]), True))
        else:
            out.append((rng.choice(UNANSWERABLE).format(**facts), None, False))
    return out


def coqa_like(rng, n_stories, words):
    data = []
    for i in range(n_stories):
        text, facts = story(rng, rng.randint(words - 40, words + 40))
        qs, ans = [], []
        for turn, (q, a, ok) in enumerate(qa_pairs(rng, facts, 2), start=1):
            qs.append({"input_text": q, "turn_id": turn})
            ans.append({"input_text": a if ok else "unknown",
                        "span_text": a if ok else "unknown", "turn_id": turn})
        data.append({"id": f"coqa-{i:03d}", "source": "synthetic", "story": text,
                     "questions": qs, "answers": ans})
    return {"version": "1.0", "data": data}


def quac_like(rng, n_dialogs, words):
    data = []
    for i in range(n_dialogs):
        text, facts = story(rng, rng.randint(words - 40, words + 40))
        qas = []
        for turn, (q, a, ok) in enumerate(qa_pairs(rng, facts, 2)):
            text_ans = a if ok else "CANNOTANSWER"
            qas.append({"id": f"quac-{i:03d}_q#{turn}", "question": q,
                        "answers": [{"text": text_ans, "answer_start": 0}],
                        "orig_answer": {"text": text_ans, "answer_start": 0}})
        data.append({"title": facts["name"], "section_title": "Life",
                     "paragraphs": [{"id": f"quac-{i:03d}", "context": text + " CANNOTANSWER",
                                     "qas": qas}]})
    return {"data": data}


def condaqa_like(rng, n):
    rows = []
    for i in range(n):
        text, facts = story(rng, 110)
        if i % 3 == 2:
            q, label = f"Is it true that {facts['name']} never played an instrument?", "DON'T KNOW"
        elif i % 3 == 1:
            q, label = f"Did {facts['name']} not live in {facts['town']}?", "NO"
        else:
            q, label = f"Did {facts['name']} not work as a {rng.choice(JOBS)} somewhere else?", "YES"
        rows.append({"PassageID": f"p{i}", "QuestionID": f"q{i}", "original cue": "not",
                     "sentence1": text, "sentence2": q, "label": label})
    return rows


def generic_rows(rng, n):
    rows = []
    for i in range(n):
        name, pet = rng.choice(NAMES), rng.choice(PETS)
        ctx = f"{name} has a {pet}."
        if i % 2 == 0:
            rows.append({"id": f"g{i}", "context": ctx, "question": f"What pet does {name} have?",
                         "answers": [pet], "answerable": True})
        else:
            rows.append({"id": f"g{i}", "context": ctx, "question": f"Where was {name} born?",
                         "answers": [], "answerable": False})
    return rows


def write_corpora():
    out = FIX / "corpora"
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240601)
    (out / "coqa_like_dev50.json").write_text(json.dumps(coqa_like(rng, 50, 271), indent=1))
    (out / "quac_like_dev50.json").write_text(json.dumps(quac_like(rng, 50, 300), indent=1))
    with open(out / "condaqa_like.jsonl", "w") as f:
        for row in condaqa_like(rng, 12):
            f.write(json.dumps(row) + "\n")
    with open(out / "generic_toy.jsonl", "w") as f:
        for row in generic_rows(rng, 8):
            f.write(json.dumps(row) + "\n")
    corpus = []
    for _ in range(400):
        corpus.append(story(rng, 80)[0])
        facts = story(rng, 10)[1]
        corpus.extend(q for q, _, _ in qa_pairs(rng, facts, 4))
    corpus.append("Is this answerable? Answer the question or say don't know. "
                  "Are you certain about the answer? Yes. No. True. False.")
    return corpus


def train_tokenizer(corpus, vocab):
    tok = Tokenizer(models.BPE())
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    tok.decoder = decoders.ByteLevel()
    trainer = trainers.BpeTrainer(vocab_size=vocab, special_tokens=["<s>", "</s>"],
                                  initial_alphabet=pre_tokenizers.ByteLevel.alphabet(),
                                  show_progress=False)
    tok.train_from_iterator(corpus, trainer)
    return tok


GOLDEN_TEXTS = [
    "Mara lived in the town of Kelso.\nWhere did Mara live?",
    "Is this answerable?\nWhat was the name of the dog?",
    "The bell in the square rang twice each hour.",
]


def capture(model, ids):
    layers = model.model.layers
    outs = []
    hooks = [l.register_forward_hook(lambda m, i, o: outs.append(
        (o[0] if isinstance(o, tuple) else o).detach())) for l in layers]
    with torch.no_grad():
        logits = model(torch.tensor([ids])).logits[0]
    for h in hooks:
        h.remove()
    blocks = [o[0] for o in outs]
    lens = []
    for li, h in enumerate(blocks):
        hn = model.model.norm(h)
        lp = torch.log_softmax(model.lm_head(hn).double(), dim=-1) / torch.log(torch.tensor(2.0, dtype=torch.float64))
        lens.append([lp[t - 1, ids[t]].item() for t in range(1, len(ids))])
    final = torch.log_softmax(logits.double(), dim=-1) / torch.log(torch.tensor(2.0, dtype=torch.float64))
    return blocks, lens, [final[t - 1, ids[t]].item() for t in range(1, len(ids))]


def build_model(kind, tok, out):
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(7 if kind == "llama" else 11)
    vocab = tok.get_vocab_size()
    if kind == "llama":
        from transformers import LlamaConfig, LlamaForCausalLM
        cfg = LlamaConfig(vocab_size=vocab, hidden_size=32, intermediate_size=64,
                          num_hidden_layers=3, num_attention_heads=4, num_key_value_heads=2,
                          max_position_embeddings=2048, rms_norm_eps=1e-5, rope_theta=10000.0,
                          rope_scaling={"rope_type": "llama3", "factor": 8.0,
                                        "low_freq_factor": 1.0, "high_freq_factor": 4.0,
                                        "original_max_position_embeddings": 64},
                          tie_word_embeddings=False, bos_token_id=0, eos_token_id=1,
                          initializer_range=0.3)
        model = LlamaForCausalLM(cfg)
    else:
        from transformers import Qwen2Config, Qwen2ForCausalLM
        cfg = Qwen2Config(vocab_size=vocab, hidden_size=32, intermediate_size=48,
                          num_hidden_layers=2, num_attention_heads=4, num_key_value_heads=2,
                          max_position_embeddings=2048, rms_norm_eps=1e-6, rope_theta=1000000.0,
                          tie_word_embeddings=True, bos_token_id=0, eos_token_id=1,
                          initializer_range=0.3)
        model = Qwen2ForCausalLM(cfg)
        with torch.no_grad():
            for layer in model.model.layers:
                for proj in (layer.self_attn.q_proj, layer.self_attn.k_proj, layer.self_attn.v_proj):
                    proj.bias.normal_(0.0, 0.3)
    model.eval()
    if kind == "qwen2":
        model = model.to(torch.bfloat16)
        model.save_pretrained(out, safe_serialization=True)
        # reload so buffers such as rotary frequencies are rebuilt in f32
        model = Qwen2ForCausalLM.from_pretrained(out, dtype=torch.float32).eval()
    else:
        model.save_pretrained(out, safe_serialization=True)
    tok.save(str(out / "tokenizer.json"))
    for stale in ("generation_config.json",):
        p = out / stale
        if p.exists():
            p.unlink()

    cases = []
    for text in GOLDEN_TEXTS:
        ids = [0] + tok.encode(text).ids
        blocks, lens, final = capture(model, ids)
        with torch.no_grad():
            gen = model.generate(torch.tensor([ids]), max_new_tokens=6, do_sample=False,
                                 pad_token_id=1, eos_token_id=None)[0][len(ids):].tolist()
        cases.append({
            "text": text,
            "ids": ids,
            "block_outputs_last_position": [b[-1].tolist() for b in blocks],
            "lens_log2": lens,
            "final_log2": final,
            "greedy_continuation": gen,
        })
    (out / "golden.json").write_text(json.dumps({"cases": cases}, indent=1))


def main():
    corpus = write_corpora()
    tok = train_tokenizer(corpus, 600)
    build_model("llama", tok, FIX / "tiny-llama")
    build_model("qwen2", tok, FIX / "tiny-qwen2")


if __name__ == "__main__":
    main()
