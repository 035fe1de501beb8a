"""Hand-crafted capture shared by the ingest, CLI and acceptance tests."""

from devo.flows import PacketEvent, Transport

CLIENTS = ["10.0.0.1", "10.0.0.2", "10.0.0.3"]
SERVER = "192.0.2.10"


def three_flow_events():
    """Three interleaved TCP flows, each opened by a zero-payload SYN."""
    out = []
    t = 1_700_000_000_000_000
    script = [
        (0, True, 0), (1, True, 0), (0, False, 0), (0, True, 517), (2, True, 0),
        (0, False, 1400), (1, True, 300), (2, True, 90), (1, False, 1200),
        (0, True, 64), (2, False, 1500), (1, False, 0), (2, True, 33),
    ]
    for i, (c, fwd, plen) in enumerate(script):
        src, dst = (CLIENTS[c], 50000 + c), (SERVER, 443)
        if not fwd:
            src, dst = dst, src
        out.append(PacketEvent(t + i * 1000, src[0], src[1], dst[0], dst[1], Transport.TCP, plen))
    return out


EXPECTED = {
    "10.0.0.1": [517, -1400, 64],
    "10.0.0.2": [300, -1200],
    "10.0.0.3": [90, -1500, 33],
}
