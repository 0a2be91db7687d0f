"""
Error types shared by the engine, the gateway and the CLI.

Every error carries a machine-readable ``code`` (used in ``{"ok": false, "error": code}``
response bodies) and the HTTP status the gateway answers with.
"""


class SyndesiError(Exception):
    code = 'internal'
    status = 500

    def __init__(self, message: str = '', **details):
        super().__init__(message or self.code)
        self.details = details

    def to_dict(self):
        body = {'ok': False, 'error': self.code, 'message': str(self)}
        if self.details:
            body['details'] = self.details
        return body


class ValidationError(SyndesiError):
    code = 'validation'
    status = 400


class ParseError(SyndesiError):
    code = 'parse'
    status = 400


class ContractError(SyndesiError):
    code = 'contract'
    status = 400


class ConflictError(SyndesiError):
    code = 'conflict'
    status = 409


class NotFoundError(SyndesiError):
    code = 'not-found'
    status = 404


class InvalidTargetError(SyndesiError):
    code = 'invalid-target'
    status = 400


class InvalidStatusError(SyndesiError):
    code = 'invalid-status'
    status = 400


class UnderdeterminedError(SyndesiError):
    code = 'underdetermined'
    status = 422


class CollapseError(SyndesiError):
    """All particle weights vanished"""
    code = 'collapse'
    status = 409


class InitializationError(SyndesiError):
    code = 'initialization'
    status = 422


class TrainingError(SyndesiError):
    code = 'training'
    status = 422


class CompassError(SyndesiError):
    """Magnetic vector (nearly) parallel to gravity, heading undefined"""
    code = 'compass'
    status = 422


class GatewayUnavailableError(SyndesiError):
    code = 'gateway-unavailable'
    status = 503
