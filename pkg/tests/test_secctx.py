import itertools

import pytest
from hypothesis import given, strategies as st

from fiveg_privacy.secctx import (
    Direction,
    Layer,
    MacTag,
    Nea,
    Nia,
    NegotiationError,
    SecurityCapabilities,
    cipher,
    compute_mac,
    decipher,
    derive_context,
    select_algorithms,
    verify_mac,
)

from oracles import preferred, subsets

MASTER = bytes(range(32))
ALL_NEA = list(Nea)
ALL_NIA = list(Nia)


def ctx(nea=Nea.NEA2, nia=Nia.NIA2, layer=Layer.NAS, master=MASTER):
    return derive_context(master, (nea, nia), layer)


# -- negotiation ---------------------------------------------------------

@pytest.mark.parametrize("nea_caps", list(subsets(ALL_NEA)))
@pytest.mark.parametrize("nia_caps", list(subsets(ALL_NIA)))
def test_selection_matches_brute_force_oracle(nea_caps, nia_caps):
    caps = SecurityCapabilities(nea_caps, nia_caps)
    for nea_pref in (ALL_NEA[::-1], (Nea.NEA1, Nea.NEA0), (Nea.NEA3,)):
        for nia_pref in (ALL_NIA[::-1], (Nia.NIA1,), (Nia.NIA2, Nia.NIA3)):
            want_nea = preferred(nea_caps, nea_pref)
            want_nia = preferred(nia_caps, nia_pref)
            if want_nea is None or want_nia is None:
                with pytest.raises(NegotiationError):
                    select_algorithms(caps, nea_pref, nia_pref)
            else:
                assert select_algorithms(caps, nea_pref, nia_pref) == (want_nea, want_nia)


def test_selection_is_bounded_by_ue_caps():
    weak = SecurityCapabilities.weakest()
    with pytest.raises(NegotiationError):
        select_algorithms(weak)
    assert select_algorithms(weak, (Nea.NEA2, Nea.NEA0), (Nia.NIA2, Nia.NIA0)) == (Nea.NEA0, Nia.NIA0)


def test_compliance():
    assert SecurityCapabilities().is_compliant()
    assert not SecurityCapabilities.weakest().is_compliant()
    assert SecurityCapabilities(ALL_NEA, ALL_NIA).is_compliant()


def test_capabilities_type_check():
    with pytest.raises(TypeError):
        SecurityCapabilities({Nia.NIA1}, {Nia.NIA1})


def test_caps_text():
    assert SecurityCapabilities().text == "EA0,EA1,EA2/IA0,IA1,IA2"


# -- counts ------------------------------------------------------------

def test_counts_are_per_direction_and_monotone():
    c = ctx()
    assert [c.next_count(Direction.DOWNLINK) for _ in range(3)] == [0, 1, 2]
    assert c.next_count(Direction.UPLINK) == 0
    assert c.accept_count(Direction.UPLINK, 5)
    assert not c.accept_count(Direction.UPLINK, 5)
    assert not c.accept_count(Direction.UPLINK, 2)
    assert c.accept_count(Direction.UPLINK, 6)


def test_count_overflow():
    c = ctx()
    c.dl_count = 0xFFFFFFFF
    with pytest.raises(OverflowError):
        c.next_count(Direction.DOWNLINK)


def test_master_key_length():
    with pytest.raises(ValueError):
        derive_context(b"short", (Nea.NEA2, Nia.NIA2))


def test_layers_use_distinct_keys():
    nas, rrc = ctx(layer=Layer.NAS), ctx(layer=Layer.RRC)
    assert nas.int_key != rrc.int_key and nas.enc_key != rrc.enc_key
    assert compute_mac(nas, Direction.UPLINK, 0, b"x") != compute_mac(rrc, Direction.UPLINK, 0, b"x")


def test_mac_tag_bounds():
    with pytest.raises(ValueError):
        MacTag(1 << 32)
    assert MacTag(255).hex == "000000ff"


# -- integrity ---------------------------------------------------------

@pytest.mark.parametrize("nia", [Nia.NIA1, Nia.NIA2, Nia.NIA3])
@given(msg=st.binary(max_size=64), count=st.integers(0, 2**32 - 1), bit=st.integers(0, 511))
def test_mac_detects_any_single_bit_flip(nia, msg, count, bit):
    c = ctx(nia=nia)
    tag = compute_mac(c, Direction.DOWNLINK, count, msg)
    assert verify_mac(c, Direction.DOWNLINK, count, msg, tag)
    if msg:
        i = bit % (len(msg) * 8)
        flipped = bytearray(msg)
        flipped[i // 8] ^= 1 << (i % 8)
        # a 32-bit tag: a collision on one specific flip is a 2^-32 event
        assert not verify_mac(c, Direction.DOWNLINK, count, bytes(flipped), tag)


@pytest.mark.parametrize("nia", [Nia.NIA1, Nia.NIA2, Nia.NIA3])
def test_mac_binds_direction_count_and_key(nia):
    c = ctx(nia=nia)
    tag = compute_mac(c, Direction.DOWNLINK, 7, b"hello")
    assert not verify_mac(c, Direction.UPLINK, 7, b"hello", tag)
    assert not verify_mac(c, Direction.DOWNLINK, 8, b"hello", tag)
    other = ctx(nia=nia, master=bytes(32))
    assert not verify_mac(other, Direction.DOWNLINK, 7, b"hello", tag)


def test_null_integrity_tag_is_zero_and_forgeable():
    c = ctx(nia=Nia.NIA0)
    assert compute_mac(c, Direction.DOWNLINK, 0, b"a").value == 0
    assert verify_mac(c, Direction.DOWNLINK, 0, b"anything", MacTag(0))


# -- ciphering ---------------------------------------------------------

@pytest.mark.parametrize("nea", ALL_NEA)
@given(msg=st.binary(max_size=200), count=st.integers(0, 2**32 - 1))
def test_cipher_roundtrip(nea, msg, count):
    c = ctx(nea=nea)
    ct = cipher(c, Direction.UPLINK, count, msg)
    assert len(ct) == len(msg)
    assert decipher(c, Direction.UPLINK, count, ct) == msg


def test_null_cipher_is_identity():
    assert cipher(ctx(nea=Nea.NEA0), Direction.UPLINK, 0, b"clear") == b"clear"


@pytest.mark.parametrize("nea", [Nea.NEA1, Nea.NEA2, Nea.NEA3])
def test_cipher_changes_data_and_depends_on_count_and_direction(nea):
    c = ctx(nea=nea)
    msg = b"\x00" * 48
    outs = {cipher(c, d, n, msg) for d, n in itertools.product(Direction, range(4))}
    assert len(outs) == 8 and msg not in outs


@pytest.mark.parametrize("nea", [Nea.NEA1, Nea.NEA2, Nea.NEA3])
def test_wrong_key_does_not_decipher(nea):
    msg = b"imsi-214070123456789"
    ct = cipher(ctx(nea=nea), Direction.UPLINK, 1, msg)
    assert decipher(ctx(nea=nea, master=bytes(32)), Direction.UPLINK, 1, ct) != msg
