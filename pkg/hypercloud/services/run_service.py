import logging
from typing import Dict, List, Optional

from sqlalchemy import func
from sqlalchemy.orm import Session

from .benchmark_service import BenchResult
from .database import BenchmarkRecord, EpochRecord, EvaluationRecord, TrainingRun
from .pipeline_service import TrainConfig, TrainResult
from .report_service import ReportEntry

logger = logging.getLogger(__name__)


def record_training_run(db: Session, config: TrainConfig, result: TrainResult,
                        run_name: str = "run", weights_path: Optional[str] = None) -> int:
    """Store a finished training run with its epoch losses; returns the run id."""
    last = result.history[-1] if result.history else None
    run = TrainingRun(
        run_name=run_name,
        model_kind=config.model_kind.value,
        model_name=result.model.name,
        channels=config.scenario.channel_count,
        epochs=config.epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        seed=config.seed,
        parameter_count=result.model.parameter_count,
        final_train_loss=last.train_loss if last else None,
        final_val_loss=last.val_loss if last else None,
        weights_path=str(weights_path) if weights_path else None,
    )
    db.add(run)
    db.flush()
    for log in result.history:
        db.add(EpochRecord(run_id=run.id, epoch=log.epoch, train_loss=log.train_loss,
                           val_loss=log.val_loss, seconds=log.seconds))
    db.commit()
    logger.info("Recorded training run %d (%s)", run.id, run_name)
    return run.id


def record_benchmark(db: Session, bench: BenchResult, run_id: Optional[int] = None) -> int:
    record = BenchmarkRecord(
        run_id=run_id,
        model_name=bench.model_name,
        channels=bench.channels,
        tiles=bench.tiles,
        repetitions=bench.repetitions,
        mean_seconds=bench.mean_seconds,
        min_seconds=bench.min_seconds,
        max_seconds=bench.max_seconds,
        parameter_count=bench.size.parameter_count,
        bytes_in_memory=bench.size.bytes_in_memory,
        bytes_on_disk=bench.size.bytes_on_disk,
    )
    db.add(record)
    db.commit()
    return record.id


def record_evaluation(db: Session, entry: ReportEntry, run_id: Optional[int] = None) -> int:
    record = EvaluationRecord(
        run_id=run_id,
        model_name=entry.model,
        scenario=entry.scenario,
        split=entry.split,
        tiles=entry.tiles,
        pixel_accuracy=entry.seg.pixel_accuracy,
        dice_macro=entry.seg.dice_macro,
        dice_cloud=entry.seg.dice_cloud,
        cls_accuracy=entry.cls.accuracy,
        cls_f1=entry.cls.f1,
    )
    db.add(record)
    db.commit()
    return record.id


def get_run_history(db: Session, limit: int = 20) -> List[Dict]:
    """Most recent training runs first."""
    try:
        runs = db.query(TrainingRun).order_by(TrainingRun.id.desc()).limit(limit).all()
        return [
            {
                "id": run.id,
                "run_name": run.run_name,
                "model_name": run.model_name,
                "model_kind": run.model_kind,
                "channels": run.channels,
                "epochs": run.epochs,
                "final_train_loss": run.final_train_loss,
                "final_val_loss": run.final_val_loss,
                "parameter_count": run.parameter_count,
            }
            for run in runs
        ]
    except Exception as e:
        logger.error(f"Error getting run history: {e}")
        return []


def get_training_curve(db: Session, run_id: int) -> List[Dict]:
    try:
        records = db.query(EpochRecord).filter(
            EpochRecord.run_id == run_id
        ).order_by(EpochRecord.epoch).all()
        return [
            {"epoch": r.epoch, "train_loss": r.train_loss, "val_loss": r.val_loss, "seconds": r.seconds}
            for r in records
        ]
    except Exception as e:
        logger.error(f"Error getting training curve for run {run_id}: {e}")
        return []


def get_registry_statistics(db: Session) -> Dict:
    """Counts plus the best test pixel accuracy and the fastest benchmarked model."""
    try:
        best = db.query(EvaluationRecord).filter(
            EvaluationRecord.split == "test"
        ).order_by(EvaluationRecord.pixel_accuracy.desc()).first()
        fastest = db.query(BenchmarkRecord).order_by(BenchmarkRecord.mean_seconds).first()
        return {
            "total_runs": db.query(func.count(TrainingRun.id)).scalar() or 0,
            "total_benchmarks": db.query(func.count(BenchmarkRecord.id)).scalar() or 0,
            "total_evaluations": db.query(func.count(EvaluationRecord.id)).scalar() or 0,
            "best_test_pixel_accuracy": best.pixel_accuracy if best else None,
            "best_test_model": f"{best.model_name} ({best.scenario} ch)" if best else None,
            "fastest_model": f"{fastest.model_name} ({fastest.channels} ch)" if fastest else None,
        }
    except Exception as e:
        logger.error(f"Error getting registry statistics: {e}")
        return {
            "total_runs": 0,
            "total_benchmarks": 0,
            "total_evaluations": 0,
            "best_test_pixel_accuracy": None,
            "best_test_model": None,
            "fastest_model": None,
        }
