from sqlalchemy import Column, Integer, String, Text, DateTime, Float, ForeignKey, Boolean
from sqlalchemy.orm import relationship
from sqlalchemy.sql import func # For server-side default timestamps
from ..core.database import Base


class TrainingRun(Base):
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    name = Column(String, index=True, nullable=False)
    variant = Column(String, nullable=False, comment="Actor-critic pairing, e.g. DT-GRU")
    context_k = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    config_text = Column(Text, nullable=False, comment="Resolved flat config snapshot")
    out_dir = Column(String, nullable=False)
    status = Column(String, nullable=False, default="running", comment="running, finished or failed")
    best_moving_average = Column(Float, nullable=True)
    best_episode = Column(Integer, nullable=True)

    created_at = Column(DateTime(timezone=True), server_default=func.now())
    updated_at = Column(DateTime(timezone=True), onupdate=func.now(), server_default=func.now())

    episodes = relationship("EpisodeRecord", back_populates="run", cascade="all, delete-orphan",
                            order_by="EpisodeRecord.episode")

    def __repr__(self):
        return f"<TrainingRun(id={self.id}, name='{self.name}', variant='{self.variant}')>"


class EpisodeRecord(Base):
    __tablename__ = "episode_records"
    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("training_runs.id"), nullable=False)
    episode = Column(Integer, nullable=False)
    steps = Column(Integer, nullable=False)
    mean_reward = Column(Float, nullable=False)
    critic1_loss = Column(Float, nullable=True)
    critic2_loss = Column(Float, nullable=True)
    actor_loss = Column(Float, nullable=True)
    alpha = Column(Float, nullable=False)
    final_soc = Column(Float, nullable=False)
    fuel_g = Column(Float, nullable=False)
    failed = Column(Boolean, nullable=False, default=False, comment="SOC hit the hard floor or ceiling")

    run = relationship("TrainingRun", back_populates="episodes")

    def __repr__(self):
        return f"<EpisodeRecord(run_id={self.run_id}, episode={self.episode}, mean_reward={self.mean_reward:.4f})>"


class EvaluationRecord(Base):
    __tablename__ = "evaluation_records"
    id = Column(Integer, primary_key=True, index=True, autoincrement=True)
    source = Column(String, nullable=False, comment="'dp' or the evaluated checkpoint path")
    variant = Column(String, nullable=False)
    cycle_name = Column(String, nullable=False)
    initial_soc = Column(Float, nullable=False)
    final_soc = Column(Float, nullable=False)
    fuel_g = Column(Float, nullable=False)
    distance_m = Column(Float, nullable=False)
    mpg = Column(Float, nullable=True, comment="NULL when no fuel was burned")
    trace_path = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now())

    def __repr__(self):
        return f"<EvaluationRecord(id={self.id}, source='{self.source}', cycle='{self.cycle_name}')>"
