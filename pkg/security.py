# 📄 security.py
import os
import secrets

from fastapi import HTTPException, Security, status
from fastapi.security.api_key import APIKeyHeader

API_KEY_ENV = "PMS_API_KEY"
API_KEY_NAME = "X-PMS-SECRET"
DEFAULT_API_KEY = "change-me"  # Override with PMS_API_KEY outside local runs.

api_key_header = APIKeyHeader(name=API_KEY_NAME, auto_error=True)


def expected_api_key() -> str:
    return os.environ.get(API_KEY_ENV, DEFAULT_API_KEY)


def using_default_key() -> bool:
    return expected_api_key() == DEFAULT_API_KEY


async def get_api_key(api_key: str = Security(api_key_header)) -> str:
    """Recognizer endpoints other than /health require the X-PMS-SECRET header."""
    if not secrets.compare_digest(api_key.encode(), expected_api_key().encode()):
        raise HTTPException(status_code=status.HTTP_403_FORBIDDEN, detail="Could not validate credentials")
    return api_key
