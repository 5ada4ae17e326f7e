from dataclasses import dataclass

import pytest

from rrcnn import config as C


@dataclass
class Demo:
    name: str = "x"
    n: int = 1
    lr: float = 0.1
    flag: bool = False
    weights: tuple = (0.2, 0.8)


def test_parse_values():
    d = C.loads("""
        # comment
        name = rrcnn1   # trailing comment
        n = 3
        lr = 1e-3
        flag = true
        weights = 0.3, 0.7
        empty =
    """)
    assert d == {"name": "rrcnn1", "n": 3, "lr": 1e-3, "flag": True, "weights": (0.3, 0.7), "empty": None}


def test_roundtrip():
    d = {"a": 1, "b": 2.5, "c": "text", "d": (1, 2), "e": False, "f": (0.5,)}
    assert C.loads(C.dumps(d, header="hello")) == d


def test_errors():
    with pytest.raises(C.ConfigError, match=":2"):
        C.loads("a = 1\nnot a pair\n")
    with pytest.raises(C.ConfigError, match="duplicate"):
        C.loads("a = 1\na = 2\n")
    with pytest.raises(C.ConfigError):
        C.load("/nonexistent/file.cfg")


def test_coerce_dataclass():
    obj = C.coerce_dataclass(Demo, {"n": 4.0, "lr": 1, "weights": (1, 2)})
    assert obj == Demo(n=4, lr=1.0, weights=(1.0, 2.0))
    with pytest.raises(C.ConfigError, match="unknown"):
        C.coerce_dataclass(Demo, {"bogus": 1})
    with pytest.raises(C.ConfigError, match="'n'"):
        C.coerce_dataclass(Demo, {"n": 1.5})
    with pytest.raises(C.ConfigError):
        C.coerce_dataclass(Demo, {"flag": 3})
