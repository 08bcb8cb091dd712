from sqlalchemy.orm import Session
from ..models import persistent_models

# --- TrainingRun CRUD Operations ---

def create_run(db: Session, name: str, variant: str, context_k: int, seed: int,
               config_text: str, out_dir: str) -> persistent_models.TrainingRun:
    db_run = persistent_models.TrainingRun(
        name=name, variant=variant, context_k=context_k, seed=seed,
        config_text=config_text, out_dir=out_dir, status="running",
    )
    db.add(db_run)
    db.commit()
    db.refresh(db_run)
    return db_run


def get_run(db: Session, run_id: int) -> persistent_models.TrainingRun | None:
    return db.query(persistent_models.TrainingRun).filter(persistent_models.TrainingRun.id == run_id).first()


def get_runs_by_name(db: Session, name: str) -> list[persistent_models.TrainingRun]:
    return (db.query(persistent_models.TrainingRun)
            .filter(persistent_models.TrainingRun.name == name)
            .order_by(persistent_models.TrainingRun.id).all())


def update_run(db: Session, run_id: int, updates: dict) -> persistent_models.TrainingRun | None:
    """
    Updates fields of an existing run ('status', 'best_moving_average', ...).
    Unknown keys raise ValueError.
    """
    db_run = get_run(db, run_id)
    if db_run is None:
        return None
    for key, value in updates.items():
        if not hasattr(db_run, key):
            raise ValueError(f"TrainingRun has no attribute '{key}'")
        setattr(db_run, key, value)
    db.commit()
    db.refresh(db_run)
    return db_run

# --- EpisodeRecord CRUD Operations ---

def record_episode(db: Session, run_id: int, row: dict) -> persistent_models.EpisodeRecord:
    """'row' is one training-log row; keys match EpisodeRecord columns."""
    db_episode = persistent_models.EpisodeRecord(run_id=run_id, **row)
    db.add(db_episode)
    db.commit()
    return db_episode


def get_episodes(db: Session, run_id: int, limit: int = 100_000, skip: int = 0) -> list[persistent_models.EpisodeRecord]:
    return (db.query(persistent_models.EpisodeRecord)
            .filter(persistent_models.EpisodeRecord.run_id == run_id)
            .order_by(persistent_models.EpisodeRecord.episode)
            .offset(skip).limit(limit).all())

# --- EvaluationRecord CRUD Operations ---

def record_evaluation(db: Session, **fields) -> persistent_models.EvaluationRecord:
    db_eval = persistent_models.EvaluationRecord(**fields)
    db.add(db_eval)
    db.commit()
    db.refresh(db_eval)
    return db_eval


def get_evaluations(db: Session, cycle_name: str | None = None) -> list[persistent_models.EvaluationRecord]:
    query = db.query(persistent_models.EvaluationRecord)
    if cycle_name:
        query = query.filter(persistent_models.EvaluationRecord.cycle_name == cycle_name)
    return query.order_by(persistent_models.EvaluationRecord.id).all()
