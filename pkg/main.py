from fastapi import FastAPI

from core.log_config import setup_logging
from routers import runs

setup_logging()

app = FastAPI(title="uda-detect results")

# router routes
app.include_router(runs.router, prefix="/runs", tags=["runs"])


@app.get("/")
def read_root():
    return {"message": "uda-detect results API is running!"}
