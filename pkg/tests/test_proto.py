import json

import pytest
from hypothesis import given, settings, strategies as st

from fiveg_privacy import proto as P
from fiveg_privacy.identity import Crnti, Guti, Pei, Supi, s_tmsi_of
from fiveg_privacy.secctx import Direction, Layer, Nea, Nia, SecurityCapabilities, derive_context

import strategies as S

MASTER = bytes(range(32))
UP, DOWN = Direction.UPLINK, Direction.DOWNLINK
SUPI = Supi("214", "07", "0123456789")
GUTI = Guti("214", "07", 1, 2, 3, 0xABCDEF01)


def pair(nea=Nea.NEA2, nia=Nia.NIA2):
    """Sender and receiver copies of one context."""
    return derive_context(MASTER, (nea, nia)), derive_context(MASTER, (nea, nia))


# -- message codec -------------------------------------------------------

@given(S.messages)
def test_message_codec_roundtrip(msg):
    assert P.decode_message(P.encode_message(msg)) == msg


@given(S.messages)
def test_message_layer_matches_family(msg):
    if isinstance(msg, P.NasMessage):
        assert msg.layer is Layer.NAS
    elif isinstance(msg, P.RrcMessage):
        assert msg.layer is Layer.RRC
    else:
        assert msg.layer is Layer.PAGING


@pytest.mark.parametrize("data", [b"", b"{}", b'{"$t":"Nope"}', b"\xff\xfe", b'{"$t":"RrcSetup"}'])
def test_decode_message_rejects_garbage(data):
    with pytest.raises(P.ProtocolError):
        P.decode_message(data)


def test_every_message_type_is_registered():
    assert set(P.MESSAGE_TYPES) == {c.__name__ for c in P.NAS_MESSAGES + P.RRC_MESSAGES} | {"Paging"}


def test_radio_caps_need_content():
    with pytest.raises(ValueError):
        P.RadioCapabilities(frozenset(), frozenset(P.Generation))


# -- protection ----------------------------------------------------------

def test_plain_envelope():
    env = P.plain(P.RrcSetupRequest(), Crnti(17))
    assert not env.integrity_protected and not env.ciphered and env.mac is None
    assert P.unprotect(env, None, UP) == P.RrcSetupRequest()


def test_protect_needs_context():
    with pytest.raises(P.NoContextError):
        P.protect(P.ServiceAccept(), None, integrity=True, cipher_=False)
    # no protection requested: a context is not needed
    assert P.protect(P.ServiceAccept(), None, False, False).mac is None


@given(S.messages, st.booleans(), st.booleans(), st.sampled_from(Nea), st.sampled_from(Nia))
def test_protect_unprotect_roundtrip(msg, integrity, ciph, nea, nia):
    tx, rx = pair(nea, nia)
    env = P.protect(msg, tx, integrity, ciph, DOWN)
    assert P.unprotect(env, rx, DOWN) == msg
    if ciph:
        assert env.ciphertext is not None and env.nea is nea
        assert env.effectively_ciphered == (nea is not Nea.NEA0)


def test_counts_advance_and_replay_is_refused():
    tx, rx = pair()
    first = P.protect(P.ServiceAccept(), tx, True, True, DOWN)
    second = P.protect(P.ServiceAccept(), tx, True, True, DOWN)
    assert (first.count, second.count) == (0, 1)
    P.unprotect(first, rx, DOWN)
    P.unprotect(second, rx, DOWN)
    with pytest.raises(P.IntegrityFailure):
        P.unprotect(first, rx, DOWN)


def test_tampered_mac_or_payload_is_rejected():
    tx, rx = pair()
    env = P.protect(P.ConfigurationUpdateCommand(GUTI), tx, True, False, DOWN)
    bad_mac = P.SecurityEnvelope(**{**env.__dict__, "mac": type(env.mac)(env.mac.value ^ 1)})
    with pytest.raises(P.IntegrityFailure):
        P.unprotect(bad_mac, rx, DOWN)
    swapped = P.SecurityEnvelope(**{**env.__dict__, "payload": P.ConfigurationUpdateCommand(None)})
    with pytest.raises(P.IntegrityFailure):
        P.unprotect(swapped, rx, DOWN)


def test_ciphered_without_context_is_unreadable():
    tx, _ = pair()
    env = P.protect(P.RegistrationAccept(GUTI), tx, True, True, DOWN)
    with pytest.raises(P.IntegrityFailure):
        P.unprotect(env, None, DOWN)


def test_null_cipher_without_context_is_readable():
    tx, _ = pair(nea=Nea.NEA0)
    env = P.protect(P.RegistrationAccept(GUTI), tx, False, True, DOWN)
    assert not env.effectively_ciphered
    assert P.unprotect(env, None, DOWN) == P.RegistrationAccept(GUTI)


def test_garbled_ciphertext_is_integrity_failure():
    tx, rx = pair()
    env = P.protect(P.RegistrationAccept(GUTI), tx, False, True, DOWN)
    junk = P.SecurityEnvelope(**{**env.__dict__, "ciphertext": bytes(len(env.ciphertext))})
    with pytest.raises(P.IntegrityFailure):
        P.unprotect(junk, rx, DOWN)


# -- exposure ------------------------------------------------------------

def test_exposure_of_clear_identifiers():
    pei = Pei.from_body("49015420", "323751")
    env = P.plain(P.IdentityResponse(SUPI), Crnti(5))
    assert P.exposed_fields(env) == {("SUPI", SUPI.text), ("CRNTI", "c-rnti-0x0005")}
    assert ("PEI", pei.text) in P.exposed_fields(P.plain(P.SecurityModeComplete(pei)))
    assert ("GUTI", GUTI.text) in P.exposed_fields(P.plain(P.RegistrationAccept(GUTI)))
    stmsi = s_tmsi_of(GUTI)
    assert ("S-TMSI", stmsi.text) in P.exposed_fields(P.plain(P.Paging(stmsi)))
    kinds = {k for k, _ in P.exposed_fields(P.plain(P.MeasurementReport(((1, -80.0),))))}
    assert "MEASUREMENT" in kinds


@given(S.envelopes())
def test_crnti_always_exposed_and_cipher_hides_payload(env):
    exposed = P.exposed_fields(env)
    kinds = {k for k, _ in exposed}
    assert ("CRNTI" in kinds) == (env.crnti is not None)
    if env.effectively_ciphered:
        assert kinds <= {"CRNTI"}


# -- traces --------------------------------------------------------------

@settings(max_examples=200)
@given(S.traces())
def test_trace_roundtrip(trace):
    data = P.encode_trace(trace)
    again = P.decode_trace(data)
    assert again.events == trace.events
    assert P.encode_trace(again) == data


def test_trace_helpers():
    tr = P.Trace()
    tr.record(0.0, UP, P.plain(P.RrcSetupRequest()))
    tr.record(0.1, DOWN, P.plain(P.RrcSetup(Crnti(9))))
    assert [e.seq for e in tr] == [1, 2] and len(tr) == 2
    assert tr.index("RrcSetup") == 1 and tr.index("Paging") == -1
    assert tr.by_seq(2).kind == "RrcSetup"
    assert tr.of_kind("RrcSetupRequest") == [tr[0]]
    with pytest.raises(KeyError):
        tr.by_seq(9)
    with pytest.raises(ValueError):
        tr.append(tr[0])


def _line(**override):
    tr = P.Trace()
    tr.record(0.0, UP, P.plain(P.IdentityResponse(SUPI)))
    rec = json.loads(P.encode_trace(tr))
    rec.update(override)
    return rec


@pytest.mark.parametrize("mutate,needle", [
    (lambda r: r.update(kind="Bogus"), "unknown message kind"),
    (lambda r: r.pop("fate"), "missing field 'fate'"),
    (lambda r: r.update(dir="sideways"), "bad IdentityResponse"),
    (lambda r: r["fields"].pop("identity"), "bad IdentityResponse"),
])
def test_trace_errors_name_the_line(mutate, needle):
    good = json.dumps(_line())
    rec = _line()
    mutate(rec)
    data = "\n".join([good, json.dumps(dict(_line(), seq=2)), json.dumps(dict(rec, seq=3))])
    with pytest.raises(P.TraceParseError) as info:
        P.decode_trace(data)
    assert info.value.line == 3
    assert needle in str(info.value) and str(info.value).startswith("line 3")


def test_trace_rejects_non_json_and_non_increasing_seq():
    with pytest.raises(P.TraceParseError, match="line 1"):
        P.decode_trace("not json\n")
    line = json.dumps(_line())
    with pytest.raises(P.TraceParseError, match="line 2"):
        P.decode_trace(line + "\n" + line + "\n")
    assert len(P.decode_trace(line + "\n\n")) == 1
