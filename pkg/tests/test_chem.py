import numpy as np
import pytest
from hypothesis import given, strategies as st

from molbuild.chem import Action, Bag, Canvas, Element, State, atomic_number_of, bag_from_formula, transition
from molbuild.errors import ElementNotInBag, InvalidFocal, ParseError


class TestFormula:
    @pytest.mark.parametrize("text, counts", [
        ("H2O", {1: 2, 8: 1}),
        ("CH3OH", {6: 1, 1: 4, 8: 1}),
        ("C2H2O2", {6: 2, 1: 2, 8: 2}),
        ("CF4", {6: 1, 9: 4}),
        ("N4O", {7: 4, 8: 1}),
    ])
    def test_parse(self, text, counts):
        assert bag_from_formula(text) == Bag(counts)

    @pytest.mark.parametrize("text", ["", "Xx2", "H0", "h2o", "H2O!", "2H"])
    def test_reject(self, text):
        with pytest.raises(ParseError):
            bag_from_formula(text)

    def test_hill_order(self):
        assert bag_from_formula("OCH4").formula == "CH4O"
        assert bag_from_formula("OH2").formula == "H2O"
        assert bag_from_formula("NOC2H").formula == "C2HNO"

    @given(st.dictionaries(st.sampled_from([1, 6, 7, 8, 9]), st.integers(1, 9), min_size=1))
    def test_formula_round_trip(self, counts):
        bag = Bag(counts)
        assert bag_from_formula(bag.formula) == bag


class TestBag:
    def test_remove_is_pure(self):
        bag = bag_from_formula("H2O")
        smaller = bag.remove("H")
        assert bag.count("H") == 2 and smaller.count("H") == 1
        assert smaller.remove("H").remove("O").total == 0

    def test_remove_missing(self):
        with pytest.raises(ElementNotInBag):
            bag_from_formula("H2").remove("O")

    def test_vector(self):
        v = bag_from_formula("CH4").vector(10)
        assert v[0] == 4 and v[5] == 1 and v.sum() == 5
        assert Bag.from_vector(v) == bag_from_formula("CH4")

    def test_vector_e_max(self):
        with pytest.raises(ValueError):
            bag_from_formula("Cl").vector(10)

    def test_equality_by_counts(self):
        assert Bag([("H", 1), ("H", 1)]) == Bag({1: 2})
        assert hash(Bag({1: 2, 8: 0})) == hash(Bag({1: 2}))

    def test_negative(self):
        with pytest.raises(ValueError):
            Bag({1: -1})


class TestCanvas:
    def test_immutable(self):
        c = Canvas([1], [[0, 0, 0]])
        with pytest.raises(AttributeError):
            c.numbers = (2,)
        with pytest.raises(ValueError):
            c.positions[0, 0] = 1.0

    def test_append_is_pure(self):
        c = Canvas([1], [[0, 0, 0]])
        d = c.append("O", [1, 0, 0])
        assert len(c) == 1 and len(d) == 2
        assert d.symbols == ["H", "O"]

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            Canvas([1, 1], [[0, 0, 0]])
        with pytest.raises(ValueError):
            Canvas([1], [[np.nan, 0, 0]])

    def test_element(self):
        assert Element(8).symbol == "O"
        assert atomic_number_of("cl") == 17


class TestTransition:
    def test_places_and_consumes(self):
        s = State(Canvas(), bag_from_formula("H2"))
        s1 = transition(s, Action(0, "H"), [0, 0, 0])
        s2 = transition(s1, Action(0, "H"), [0.74, 0, 0])
        assert s2.terminal and len(s2.canvas) == 2
        assert not s1.terminal and s.bag.total == 2

    def test_invalid_focal(self):
        s = State(Canvas([1], [[0, 0, 0]]), bag_from_formula("H"))
        with pytest.raises(InvalidFocal):
            transition(s, Action(3, "H"), [1, 0, 0])

    def test_element_missing(self):
        s = State(Canvas(), bag_from_formula("H"))
        with pytest.raises(ElementNotInBag):
            transition(s, Action(0, "O"), [0, 0, 0])
