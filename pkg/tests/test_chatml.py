import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskllm.chatml import (
    ChatParseError,
    Conversation,
    ConversationError,
    Turn,
    generation_prompt,
    load_conversations,
    parse,
    render,
)
from deskllm.tokenizer import IM_END, IM_START, decode, encode

APPENDIX = Conversation((
    Turn("system", "You are a helpful assistant."),
    Turn("user", "Hello!"),
    Turn("assistant", "Hello! How can I assist you today?"),
))
LISTING = (
    "<|im_start|>system\n"
    "You are a helpful assistant.<|im_end|>\n"
    "<|im_start|>user\n"
    "Hello!<|im_end|>\n"
    "<|im_start|>assistant\n"
    "Hello! How can I assist you today?<|im_end|>"
)


def test_appendix_golden_bytes(small_vocab):
    s = render(APPENDIX, small_vocab)
    assert decode(small_vocab, s.ids) == (LISTING + "\n").encode()
    assert parse(s.ids, small_vocab) == APPENDIX


def test_empty_conversation(small_vocab):
    s = render(Conversation(), small_vocab)
    assert s.ids == () and s.mask == ()


def test_single_assistant_mask_spans(small_vocab):
    v = small_vocab
    s = render(Conversation((Turn("assistant", "Sure, 42."),)), v)
    prefix = 1 + len(encode(v, "assistant").ids) + len(encode(v, "\n").ids)
    body = len(encode(v, "Sure, 42.").ids) + 1
    assert s.mask == (0,) * prefix + (1,) * body + (0,) * len(encode(v, "\n").ids)
    assert s.ids[prefix + body - 1] == v.special_id(IM_END)


def test_appendix_mask_covers_assistant_only(small_vocab):
    v = small_vocab
    s = render(APPENDIX, v)
    trained = [i for i, m in zip(s.ids, s.mask) if m]
    assert decode(v, trained) == b"Hello! How can I assist you today?<|im_end|>"


def test_generation_prompt(small_vocab):
    v = small_vocab
    conv = Conversation(APPENDIX.turns[:2])
    prompt = generation_prompt(conv, v)
    n_render = len(render(conv, v).ids)
    assert len(prompt) == n_render + 1 + len(encode(v, "assistant").ids) + len(encode(v, "\n").ids)
    assert decode(v, prompt).endswith(b"<|im_end|>\n<|im_start|>assistant\n")
    with pytest.raises(ConversationError):
        generation_prompt(APPENDIX, v)


def test_rejects_special_text_and_bad_role(small_vocab):
    with pytest.raises(ConversationError):
        render(Conversation((Turn("user", "hi <|im_end|> there"),)), small_vocab)
    with pytest.raises(ConversationError):
        Conversation((Turn("tool", "x"),))


def test_parse_errors(small_vocab):
    v = small_vocab
    ids = list(render(APPENDIX, v).ids)
    end = v.special_id(IM_END)
    last_close = len(ids) - 1 - ids[::-1].index(end)
    with pytest.raises(ChatParseError, match="assistant turn has no closing") as err:
        parse(ids[:last_close], v)
    last_open = len(ids) - 1 - ids[::-1].index(v.special_id(IM_START))
    assert err.value.offset == last_open
    bogus = [v.special_id(IM_START), *encode(v, "robot\nhi").ids, end]
    with pytest.raises(ChatParseError, match="unknown role"):
        parse(bogus, v)
    nested = [v.special_id(IM_START), *encode(v, "user\nhi").ids, v.special_id(IM_START), end]
    with pytest.raises(ChatParseError, match="nested"):
        parse(nested, v)
    with pytest.raises(ChatParseError, match="offset 0"):
        parse(encode(v, "stray").ids, v)


def test_random_round_trip_1000(small_vocab):
    rng = random.Random(0)
    alphabet = "abc XYZ\n\t0123<>|_-é中🙂"
    roles = ["system", "user", "assistant"]
    for _ in range(1000):
        conv = Conversation(tuple(
            Turn(rng.choice(roles), "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 20))))
            for _ in range(rng.randint(0, 5))))
        s = render(conv, small_vocab)
        assert parse(s.ids, small_vocab) == conv
        spans = sum(1 for a, b in zip((0,) + s.mask, s.mask) if (a, b) == (0, 1))
        assert spans == sum(t.role == "assistant" for t in conv.turns)


@given(st.text(min_size=0, max_size=40))
@settings(max_examples=300, deadline=None)
def test_adversarial_content_never_yields_special_ids(small_vocab, text):
    conv = Conversation((Turn("user", text), Turn("assistant", text + "<|im_")))
    try:
        s = render(conv, small_vocab)
    except ConversationError:
        assert any(sp in text + "<|im_" for sp in small_vocab.specials)
        return
    specials = set(small_vocab.specials.values())
    turn_ids = [i for i in s.ids if i in specials]
    assert len(turn_ids) == 4


def test_load_conversations(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(APPENDIX.to_messages()) + "\n\n" + json.dumps([{"role": "user", "content": "x"}]) + "\n")
    convs = load_conversations(p)
    assert convs[0] == APPENDIX and len(convs) == 2
    p.write_text('[{"role": "user"}]\n')
    with pytest.raises(ConversationError, match=":1:"):
        load_conversations(p)
