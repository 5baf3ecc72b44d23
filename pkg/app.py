"""
FastAPI application serving drug-package recommendations
from a trained work directory.
"""
import logging
from contextlib import asynccontextmanager
from typing import List, Literal, Optional, Tuple

import psutil
import uvicorn
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel, Field

import settings
from corpus import LabResult
from errors import ConfigurationError, DprError, PreprocessingError, StageError
from recommend import RecommendationService

settings.configure_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(_: FastAPI):
    process = psutil.Process()
    logger.info("Startup complete, memory %.1f MB", process.memory_info().rss / 1024 / 1024)
    yield
    global service
    service = None
    logger.info("Shutdown complete")


app = FastAPI(
    lifespan=lifespan,
    title="Drug package recommendation",
    description="Interaction-aware drug package recommendation over package graphs",
    version="1.0.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Global service for lazy initialization
service: Optional[RecommendationService] = None


def get_service() -> RecommendationService:
    global service
    if service is None:
        service = RecommendationService(settings.WORKDIR)
        logger.info("Recommendation service bound to %s", settings.WORKDIR)
    return service


# Pydantic models
class LabInput(BaseModel):
    item: str
    value: float
    low: float
    high: float


class RecommendRequest(BaseModel):
    demographics: List[Tuple[str, str]] = Field(default_factory=list)
    lab_results: List[LabInput] = Field(default_factory=list)
    admission_note: str = ""
    model: Literal["ncf", "nn", "dpr-wg", "dpr-ag"] = "dpr-wg"
    k: int = Field(10, gt=0, le=100)
    heuristic: bool = False


class RecommendedPackage(BaseModel):
    rank: int
    drugs: List[str]
    drug_ids: List[int]
    score: float
    source: str
    provenance: str


class RecommendResponse(BaseModel):
    success: bool
    model: str
    packages: List[RecommendedPackage] = []


@app.get("/health")
async def health_check():
    """Health check endpoint - Lightweight"""
    process = psutil.Process()
    memory_mb = process.memory_info().rss / 1024 / 1024
    return {
        "status": "healthy",
        "memory_usage_mb": round(memory_mb, 1),
        "workdir": get_service().workdir,
        "loaded": get_service().loaded(),
    }


@app.get("/api/stats")
async def get_statistics():
    """Corpus statistics of the served work directory"""
    try:
        return {"success": True, "statistics": get_service().statistics()}
    except StageError as e:
        logger.warning("Statistics unavailable: %s", e)
        raise HTTPException(status_code=503, detail=str(e))


@app.post("/recommend", response_model=RecommendResponse)
def recommend(request: RecommendRequest):
    """Rank candidate packages for one raw patient description"""
    labs = [LabResult(lab.item, lab.value, lab.low, lab.high) for lab in request.lab_results]
    try:
        packages = get_service().recommend(
            request.demographics,
            labs,
            request.admission_note,
            model=request.model,
            k=request.k,
            heuristic=request.heuristic,
        )
    except StageError as e:
        logger.warning("Model %s unavailable: %s", request.model, e)
        raise HTTPException(status_code=503, detail=str(e))
    except (ConfigurationError, PreprocessingError) as e:
        raise HTTPException(status_code=400, detail=str(e))
    except DprError as e:
        logger.error("Recommendation failed: %s", e)
        raise HTTPException(status_code=500, detail=str(e))
    return RecommendResponse(success=True, model=request.model, packages=packages)


def serve(host: str = settings.HOST, port: int = settings.PORT, workdir: Optional[str] = None) -> None:
    global service
    if workdir is not None:
        service = RecommendationService(workdir)
    logger.info("Starting recommendation server on %s:%d", host, port)
    uvicorn.run(app, host=host, port=port, reload=False, workers=1, log_level="info")


if __name__ == "__main__":
    serve()
