"""HTTP services: the authorization server, resource servers, and context
oracles, each built by a factory over an explicit state object so tests can
wire fakes where deployments wire real HTTP."""

from .authserver import AuthServerState, SessionRecord, create_auth_app
from .esoserver import EsoServerState, SituationEvaluator, create_eso_app
from .resourceserver import ResourceServerState, create_resource_app

__all__ = [
    "AuthServerState",
    "EsoServerState",
    "ResourceServerState",
    "SessionRecord",
    "SituationEvaluator",
    "create_auth_app",
    "create_eso_app",
    "create_resource_app",
]
