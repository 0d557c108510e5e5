import dataclasses

import pytest

from careledger.careflow import CareFlow
from careledger.node import Node


@dataclasses.dataclass
class Clinic:
    node: Node
    flow: CareFlow
    admin: str = "admin"
    p1: str = "p1"
    p2: str = "p2"
    doc1: str = "doc1"
    doc2: str = "doc2"
    n1: str = "n1"
    dev1: str = "dev1"


def bootstrap_clinic(data_dir, tau: float = 0.1) -> Clinic:
    node = Node(data_dir)
    flow = CareFlow(node, tau=tau)
    members = [
        ("p1", "patient", None),
        ("p2", "patient", None),
        ("doc1", "physician", None),
        ("doc2", "physician", None),
        ("n1", "nurse", None),
        ("dev1", "iot_device", "p1"),
    ]
    for uid, role, bound in members:
        flow.register_request(uid, role, f"Test {uid}", bound)
        flow.approve_registration("admin", uid)
    return Clinic(node=node, flow=flow)


@pytest.fixture
def clinic(tmp_path) -> Clinic:
    return bootstrap_clinic(tmp_path / "node")


@pytest.fixture
def flow(clinic) -> CareFlow:
    return clinic.flow
