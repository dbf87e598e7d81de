"""Persistence for elastoscan runs."""

from .sqlite_db import RunStore, get_store, reset_store

__all__ = ['RunStore', 'get_store', 'reset_store']
