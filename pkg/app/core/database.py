# app/core/database.py

import logging
from functools import lru_cache

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import declarative_base, sessionmaker, Session

from app.core.config import database_url

logger = logging.getLogger(__name__)

Base = declarative_base()


@lru_cache(maxsize=None)
def get_engine(url: str) -> Engine:
    if url.startswith("sqlite"):
        # Ablation workers each open their own connection to the same file.
        engine = create_engine(url, connect_args={"check_same_thread": False})
    else:
        engine = create_engine(url)
    logger.debug("Connecting to database: %s", url.split("@")[-1])
    return engine


def init_db(url: str | None = None) -> Engine:
    """Create the run-registry tables if they don't exist and return the engine."""
    engine = get_engine(url or database_url())
    # Import models so that Base has them registered before create_all is called
    from app.models import persistent_models  # noqa: F401
    Base.metadata.create_all(bind=engine)
    return engine


def session_factory(url: str | None = None) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=init_db(url))


def get_db_session_for_context_manager(url: str | None = None):
    """Yields a DB session, for use with 'with contextlib.closing(...)' or next()."""
    db: Session = session_factory(url)()
    try:
        yield db
    finally:
        db.close()
