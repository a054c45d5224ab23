from fastapi import APIRouter, Depends, HTTPException

from core.config import Settings, get_settings
from core.exceptions import RunNotFoundError, UdaError
from services.report_services import list_runs, load_report, load_table

router = APIRouter()


@router.get("/", response_model=dict)
async def list_runs_endpoint(settings: Settings = Depends(get_settings)):
    """
    List the runs with an emitted report under the output root.
    Returns:
        dict: ``{"runs": [{"scenario": ..., "run": ...}, ...]}``.
    """
    try:
        return {"runs": list_runs(settings.output_root)}
    except Exception as e:
        raise HTTPException(
            status_code=500, detail=f"Unexpected Error: {str(e)}")


@router.get("/{scenario}/{run}/report", response_model=dict)
async def get_report_endpoint(scenario: str, run: str,
                              settings: Settings = Depends(get_settings)):
    """
    Get the ``report.json`` of a run.
    Args:
        scenario (str): Scenario name.
        run (str): Flag slug (e.g. ``img1-fea1-out1``) or ``ablation``.
    Returns:
        dict: The report as written.
    """
    try:
        return load_report(settings.output_root, scenario, run)
    except RunNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except UdaError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500, detail=f"Unexpected Error: {str(e)}")


@router.get("/{scenario}/{run}/table", response_model=list[dict])
async def get_table_endpoint(scenario: str, run: str,
                             settings: Settings = Depends(get_settings)):
    """
    Get the rows of a run's ``tables.csv``, cells as written.
    """
    try:
        return load_table(settings.output_root, scenario, run)
    except RunNotFoundError as e:
        raise HTTPException(status_code=404, detail=str(e))
    except UdaError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        raise HTTPException(
            status_code=500, detail=f"Unexpected Error: {str(e)}")
