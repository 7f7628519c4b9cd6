import dataclasses

import numpy as np
import pytest

from fiveg_privacy.adversary import Hooks
from fiveg_privacy.endpoints import (
    PAGING_ATTEMPTS,
    PAGING_RETRY_INTERVAL,
    T3555,
    T3555_MAX_RETRANSMISSIONS,
    AcceptancePolicy,
    Channel,
    Network,
    PagingError,
    ProtocolStall,
    SimClock,
    UePhase,
    network_step,
    run_paging_cycle,
    run_registration,
    run_service_request,
    ue_step,
)
from fiveg_privacy.identity import Supi, s_tmsi_of
from fiveg_privacy.profiles import PRESET_NAMES, hardened, preset
from fiveg_privacy.proto import encode_trace
from fiveg_privacy.secctx import Direction, MacTag, Nea

UP, DOWN = Direction.UPLINK, Direction.DOWNLINK


def setup(profile, seed=1, policy=AcceptancePolicy.PERMISSIVE, n=1):
    clock = SimClock()
    net = Network(profile, np.random.default_rng(seed), clock)
    ues = [net.provision_ue(np.random.default_rng(seed * 100 + i), policy) for i in range(n)]
    return net, ues, Channel(clock)


def kinds(trace):
    return [e.kind for e in trace]


def exposed_kinds(trace):
    return {k for e in trace for k, _ in e.exposed}


ALL_PROFILES = list(PRESET_NAMES) + ["hardened"]


def get(name):
    return hardened() if name == "hardened" else preset(name)


# -- registration --------------------------------------------------------

@pytest.mark.parametrize("name", ALL_PROFILES)
def test_registration_completes(name):
    net, (ue,), ch = setup(get(name))
    trace = run_registration(ue, net, ch)
    assert ue.phase is UePhase.CONNECTED and ue.failure is None and ue.registered
    sub = net.subscriber_of(ue)
    assert ue.stored_guti == sub.guti and sub.guti in net.registry
    assert sub.pei == ue.pei
    assert kinds(trace)[:2] == ["RrcSetupRequest", "RrcSetup"]
    # the stale GUTI from a past visit forces identity resolution
    assert "IdentityRequest" in kinds(trace)


@pytest.mark.parametrize("name", ALL_PROFILES)
def test_supi_only_in_clear_without_suci(name):
    net, (ue,), ch = setup(get(name))
    trace = run_registration(ue, net, ch)
    leaked = ("SUPI", ue.supi.text) in {x for e in trace for x in e.exposed}
    assert leaked == (not get(name).supports_suci)


def test_hardened_registration_hides_pei_and_measurements():
    net, (ue,), ch = setup(hardened())
    run_registration(ue, net, ch)
    run_paging_cycle(net, ue, channel=ch)
    assert not exposed_kinds(ch.trace) & {"SUPI", "PEI", "MEASUREMENT"}


def test_pei_requested_before_security_when_allowed():
    net, (ue,), ch = setup(hardened().with_(pei_only_in_secure=False))
    trace = run_registration(ue, net, ch)
    idx = [i for i, e in enumerate(trace) if e.kind == "IdentityResponse"
           and any(k == "PEI" for k, _ in e.exposed)]
    assert idx and idx[0] < kinds(trace).index("SecurityModeCommand")


@pytest.mark.parametrize("after", [True, False])
def test_capability_enquiry_ordering(after):
    net, (ue,), ch = setup(hardened().with_(radio_caps_after_rrc_security=after))
    trace = run_registration(ue, net, ch)
    k = kinds(trace)
    enquiry, rrc_done = k.index("UeCapabilityEnquiry"), k.index("RrcSecurityModeComplete")
    assert (enquiry > rrc_done) == after
    info = trace.of_kind("UeCapabilityInformation")[0]
    assert info.envelope.effectively_ciphered == after


def test_strict_ue_rejects_smc_without_mac():
    net, (ue,), ch = setup(preset("operator-sa-b"), policy=AcceptancePolicy.STRICT)
    trace = run_registration(ue, net, ch)
    assert ue.failure and "security mode rejected" in ue.failure
    assert "SecurityModeReject" in kinds(trace) and "RegistrationAccept" not in kinds(trace)


def test_smc_with_mac_accepted_by_strict_ue():
    net, (ue,), ch = setup(hardened(), policy=AcceptancePolicy.STRICT)
    run_registration(ue, net, ch)
    assert ue.phase is UePhase.CONNECTED
    assert ue.accepted_smc[0] is Nea.NEA2


def test_ue_and_network_step_wrappers():
    net, (ue,), _ = setup(hardened())
    ue2, out = ue_step(ue, None)
    assert ue2 is ue and [e.kind for e in out] == ["RrcSetupRequest"]
    net2, replies = network_step(net, out[0])
    assert net2 is net and [e.kind for e in replies] == ["RrcSetup"]
    _, more = ue_step(ue, replies[0])
    assert [e.kind for e in more] == ["RegistrationRequest"]
    assert ue.phase is UePhase.REGISTERING


def test_registration_must_start_idle():
    net, (ue,), ch = setup(hardened())
    run_registration(ue, net, ch)
    with pytest.raises(RuntimeError):
        run_registration(ue, net, ch)


def test_service_needs_registration():
    net, (ue,), _ = setup(hardened())
    with pytest.raises(RuntimeError):
        ue.start_service()


def test_unknown_ue_cannot_be_paged():
    net, _, _ = setup(hardened())
    other, _, _ = setup(hardened(), seed=5)
    stranger = other.provision_ue(np.random.default_rng(7))
    with pytest.raises(PagingError):
        net.subscriber_of(stranger)
    with pytest.raises(PagingError):
        net.page(net.subscribers[next(iter(net.subscribers))])


def test_runs_are_deterministic():
    def run():
        net, (ue,), ch = setup(preset("operator-sa-b"), seed=9)
        run_registration(ue, net, ch)
        run_paging_cycle(net, ue, channel=ch)
        return encode_trace(ch.trace)
    assert run() == run()


# -- paging and configuration update --------------------------------------

@pytest.mark.parametrize("name,updates", [
    ("operator-nsa", False), ("operator-sa-a", False), ("operator-sa-b", True),
    ("operator-sa-c", True), ("oai", False), ("hardened", True)])
def test_guti_reallocated_after_paging_per_policy(name, updates):
    net, (ue,), ch = setup(get(name))
    run_registration(ue, net, ch)
    before = ue.stored_guti
    trace = run_paging_cycle(net, ue, channel=ch)
    assert "ServiceRequest" in kinds(trace)
    assert ("ConfigurationUpdateCommand" in kinds(trace)) == updates
    assert (ue.stored_guti != before) == updates
    assert net.subscriber_of(ue).guti == ue.stored_guti
    assert net.idle() and ue.phase is UePhase.IDLE


def test_paging_uses_stmsi_or_legacy_supi():
    net, (ue,), ch = setup(hardened())
    run_registration(ue, net, ch)
    paged_guti = net.subscriber_of(ue).guti
    page = run_paging_cycle(net, ue, channel=ch).of_kind("Paging")[0]
    assert page.message.id == s_tmsi_of(paged_guti)
    net, (ue,), ch = setup(hardened().with_(legacy_supi_paging=True))
    run_registration(ue, net, ch)
    page = run_paging_cycle(net, ue, channel=ch).of_kind("Paging")[0]
    assert page.message.id == ue.supi


def test_only_target_answers_page():
    net, ues, ch = setup(hardened(), n=3)
    for u in ues:
        run_registration(u, net, ch)
    trace = run_paging_cycle(net, ues[0], ues[1:], channel=ch)
    assert kinds(trace).count("RrcSetupRequest") == 1
    assert ues[0].guti_history[-1] == ues[0].stored_guti


def test_paging_gives_up_after_three_attempts():
    net, (ue,), ch = setup(hardened())
    run_registration(ue, net, ch)
    ch.hooks = Hooks(drop={DOWN: lambda env: env.kind == "Paging"})
    start = ch.clock.now
    trace = run_paging_cycle(net, ue, channel=ch)
    assert kinds(trace).count("Paging") == PAGING_ATTEMPTS
    assert net.paging_failed and net.idle()
    assert ch.clock.now - start >= PAGING_ATTEMPTS * PAGING_RETRY_INTERVAL


def test_t3555_retransmits_then_keeps_old_guti():
    net, (ue,), ch = setup(hardened())
    run_registration(ue, net, ch)
    old = ue.stored_guti
    ch.hooks = Hooks(drop={DOWN: lambda env: env.kind == "ConfigurationUpdateCommand"})
    start = ch.clock.now
    trace = run_paging_cycle(net, ue, channel=ch)
    assert kinds(trace).count("ConfigurationUpdateCommand") == 1 + T3555_MAX_RETRANSMISSIONS
    assert ch.clock.now - start >= (1 + T3555_MAX_RETRANSMISSIONS) * T3555 - 1e-9
    assert net.subscriber_of(ue).guti == old == ue.stored_guti
    assert net.idle()
    # the old GUTI still reaches the UE on the next page
    ch.hooks = None
    again = run_paging_cycle(net, ue, channel=ch)
    assert "ServiceRequest" in kinds(again)


def test_ack_less_update_commits_immediately():
    net, (ue,), ch = setup(hardened().with_(config_update_ack=False))
    run_registration(ue, net, ch)
    trace = run_paging_cycle(net, ue, channel=ch)
    assert "ConfigurationUpdateComplete" not in kinds(trace)
    assert net.subscriber_of(ue).guti == ue.stored_guti


def test_timer_refresh_on_service_request():
    net, (ue,), ch = setup(preset("operator-sa-b"))
    run_registration(ue, net, ch)
    before = ue.stored_guti
    ch.clock.advance(2 * 3600)
    trace = run_service_request(ue, net, ch)
    assert "ConfigurationUpdateCommand" in kinds(trace)
    assert ue.stored_guti != before


def test_service_request_without_refresh_keeps_guti():
    net, (ue,), ch = setup(preset("operator-sa-a"))
    run_registration(ue, net, ch)
    before = ue.stored_guti
    trace = run_service_request(ue, net, ch)
    assert "ServiceAccept" in kinds(trace) and ue.stored_guti == before


def test_lost_context_forces_reauthentication():
    net, (ue,), ch = setup(hardened().with_(context_survives_idle=False))
    run_registration(ue, net, ch)
    trace = run_paging_cycle(net, ue, channel=ch)
    assert "AuthChallenge" in kinds(trace)
    cuc = trace.of_kind("ConfigurationUpdateCommand")[0]
    assert cuc.envelope.effectively_ciphered and cuc.envelope.integrity_protected


# -- failure handling ----------------------------------------------------

def _bad_mac(env):
    if env.kind == "UeCapabilityInformation":
        return dataclasses.replace(env, mac=MacTag(env.mac.value ^ 1))
    return env


def test_radio_caps_integrity_failure_reenquires_then_releases():
    net, (ue,), ch = setup(hardened())
    ch.hooks = Hooks(modify={UP: _bad_mac})
    trace = run_registration(ue, net, ch)
    assert kinds(trace).count("UeCapabilityEnquiry") == 2
    assert kinds(trace)[-1] == "RrcRelease"
    assert ue.failure == "released before registration completed"
    assert net.idle()


def test_lost_setup_stalls_with_phase():
    net, (ue,), ch = setup(hardened())
    ch.hooks = Hooks(drop={DOWN: lambda env: env.kind == "RrcSetup"})
    with pytest.raises(ProtocolStall) as info:
        run_registration(ue, net, ch)
    assert info.value.phase is UePhase.IDLE and "IDLE" in str(info.value)


def test_lost_auth_response_stalls_authenticated():
    net, (ue,), ch = setup(hardened())
    ch.hooks = Hooks(drop={UP: lambda env: env.kind == "AuthResponse"})
    with pytest.raises(ProtocolStall) as info:
        run_registration(ue, net, ch)
    assert info.value.phase is UePhase.AUTHENTICATED


def test_unknown_supi_is_rejected():
    net, (ue,), ch = setup(preset("operator-nsa"))
    ue.supi = Supi("001", "01", "999999999")
    ue.stored_guti = None
    trace = run_registration(ue, net, ch)
    assert "RegistrationReject" in kinds(trace)
    assert ue.failure.startswith("registration rejected")


def test_clock_does_not_run_backwards():
    with pytest.raises(ValueError):
        SimClock().advance(-1)
