"""Database models and configuration for the experiment run registry."""

import os
from datetime import datetime

import sqlalchemy as sa
from sqlalchemy import Column, DateTime, Float, Integer, String, create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from ..common.config import DEFAULT_DATABASE_URL

# SQLite file next to the working directory unless DATABASE_URL says otherwise
DATABASE_URL = os.getenv("DATABASE_URL", DEFAULT_DATABASE_URL)

Base = declarative_base()


class TrainingRun(Base):
    """One call of the trainer."""
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True)
    run_name = Column(String, nullable=False)
    model_kind = Column(String, nullable=False)   # liunet1d / unet2dsimple
    model_name = Column(String, nullable=False)
    channels = Column(Integer, nullable=False)    # channel scenario (1, 6, 98, ...)
    epochs = Column(Integer)
    batch_size = Column(Integer)
    learning_rate = Column(Float)
    seed = Column(Integer)
    parameter_count = Column(Integer)
    final_train_loss = Column(Float)
    final_val_loss = Column(Float)
    weights_path = Column(String)
    created_at = Column(DateTime, default=datetime.utcnow)


class EpochRecord(Base):
    """Per-epoch losses of a training run."""
    __tablename__ = "epoch_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, sa.ForeignKey("training_runs.id"), nullable=False)
    epoch = Column(Integer, nullable=False)
    train_loss = Column(Float, nullable=False)
    val_loss = Column(Float)
    seconds = Column(Float)


class BenchmarkRecord(Base):
    """Inference timing and model size for one model / scenario."""
    __tablename__ = "benchmark_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, sa.ForeignKey("training_runs.id"), nullable=True)
    model_name = Column(String, nullable=False)
    channels = Column(Integer, nullable=False)
    tiles = Column(Integer)
    repetitions = Column(Integer)
    mean_seconds = Column(Float)
    min_seconds = Column(Float)
    max_seconds = Column(Float)
    parameter_count = Column(Integer)
    bytes_in_memory = Column(Integer)
    bytes_on_disk = Column(Integer)
    created_at = Column(DateTime, default=datetime.utcnow)


class EvaluationRecord(Base):
    """Scores of one model on one split."""
    __tablename__ = "evaluation_records"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, sa.ForeignKey("training_runs.id"), nullable=True)
    model_name = Column(String, nullable=False)
    scenario = Column(Integer, nullable=False)
    split = Column(String, nullable=False)
    tiles = Column(Integer)
    pixel_accuracy = Column(Float)
    dice_macro = Column(Float)
    dice_cloud = Column(Float)
    cls_accuracy = Column(Float)
    cls_f1 = Column(Float)
    created_at = Column(DateTime, default=datetime.utcnow)


def get_engine(url: str = None):
    """Create an engine; SQLite URLs get a thread-tolerant connection."""
    url = url or DATABASE_URL
    connect_args = {"check_same_thread": False} if url.startswith("sqlite") else {}
    return create_engine(url, connect_args=connect_args)


def get_session_factory(engine):
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def create_tables(engine=None):
    """Create all tables."""
    try:
        Base.metadata.create_all(bind=engine or get_engine())
        return True
    except Exception as e:
        print(f"❌ Error creating tables: {e}")
        return False


def registry_exists(url: str = None) -> bool:
    """Whether the registry behind ``url`` can be read without creating anything.

    Only SQLite files can be checked up front; other backends are assumed present.
    """
    parsed = sa.engine.make_url(url or DATABASE_URL)
    if parsed.get_backend_name() != "sqlite":
        return True
    return bool(parsed.database) and parsed.database != ":memory:" and os.path.exists(parsed.database)
