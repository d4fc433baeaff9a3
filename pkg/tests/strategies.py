"""Hypothesis strategies for random expressions that stay finite on [-2, 2]^n."""
from hypothesis import strategies as st

from minnorm_cbf import symbolic as sym


def expressions(n: int, max_leaves: int = 12):
    leaves = st.one_of(
        st.integers(1, n).map(sym.Var),
        st.sampled_from([0.5, 1.0, 2.0, 3.0, -1.5, 0.25]).map(sym.Const),
    )

    def extend(children):
        positive = st.builds(lambda e: sym.add(sym.ONE, sym.power(e, 2)), children)
        return st.one_of(
            st.builds(sym.add, children, children),
            st.builds(sym.sub, children, children),
            st.builds(sym.mul, children, children),
            st.builds(sym.neg, children),
            st.builds(sym.power, children, st.integers(2, 3)),
            st.builds(sym.div, children, positive),
            st.builds(sym.power, positive, st.integers(-2, -1)),
            st.builds(lambda e: sym.func("sin", e), children),
            st.builds(lambda e: sym.func("cos", e), children),
            st.builds(lambda e: sym.func("tanh", e), children),
            st.builds(lambda e: sym.func("exp", sym.func("sin", e)), children),
            st.builds(lambda e: sym.func("log", e), positive),
            st.builds(lambda e: sym.func("sqrt", e), positive),
        )

    return st.recursive(leaves, extend, max_leaves=max_leaves)
