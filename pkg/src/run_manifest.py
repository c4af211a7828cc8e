#!/usr/bin/env python3
"""
Run manifests.

This module handles recording what a command did (resolved config, seed,
input digests, artifacts, timings) in <output_dir>/manifest.json, with an
optional mirror in S3.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Optional

import boto3
from botocore.exceptions import BotoCoreError, ClientError

from config import Config

MANIFEST_NAME = 'manifest.json'
S3_PREFIX = 'dsnet-runs'


class ManifestError(Exception):
    """Exception raised for run manifest errors."""
    pass


def file_digest(path: str) -> str:
    """SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    seed: int
    arguments: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = 'running'
    error: Optional[str] = None
    started_at: str = field(default_factory=utc_now)
    finished_at: Optional[str] = None

    def record_input(self, name: str, path: str):
        """Record an input file by path and content digest."""
        self.inputs[name] = f"{path}#sha256={file_digest(path)}"

    def record_artifact(self, name: str, path: str):
        self.artifacts[name] = path

    def finish(self, status: str = 'succeeded', error: Optional[str] = None):
        self.status = status
        self.error = error
        self.finished_at = utc_now()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, content: str) -> 'RunManifest':
        try:
            data = json.loads(content)
            return cls(**data)
        except (json.JSONDecodeError, TypeError) as e:
            raise ManifestError(f"Invalid run manifest: {e}")


class ManifestStore:
    """Persists run manifests locally and, when a bucket is configured, in S3."""

    def __init__(self, config: Config):
        """
        Initialize the manifest store.

        Args:
            config: Configuration object; an empty s3_bucket disables the S3 mirror
        """
        if not config:
            raise ManifestError("Configuration object is required to initialize ManifestStore.")

        self.logger = logging.getLogger(__name__)
        self.s3_bucket = config.s3_bucket
        self.s3_client = None

        if self.s3_bucket:
            s3_kwargs = {}
            if config.aws_access_key_id:
                s3_kwargs['aws_access_key_id'] = config.aws_access_key_id
            if config.aws_secret_access_key:
                s3_kwargs['aws_secret_access_key'] = config.aws_secret_access_key
            if config.aws_region:
                s3_kwargs['region_name'] = config.aws_region
            self.s3_client = boto3.client('s3', **s3_kwargs)
            self.logger.info(f"ManifestStore mirroring to s3://{self.s3_bucket}/{S3_PREFIX}/")

    def s3_key(self, output_dir: str) -> str:
        run_name = os.path.basename(os.path.normpath(os.path.abspath(output_dir)))
        return f"{S3_PREFIX}/{run_name}/{MANIFEST_NAME}"

    def save(self, manifest: RunManifest, output_dir: str) -> str:
        """
        Write the manifest to <output_dir>/manifest.json and mirror it to S3.

        Returns:
            Local manifest path

        Raises:
            ManifestError: If the local write fails (S3 failures are only logged)
        """
        path = os.path.join(output_dir, MANIFEST_NAME)
        content = manifest.to_json()
        try:
            os.makedirs(output_dir, exist_ok=True)
            with open(path, 'w') as f:
                f.write(content + '\n')
        except OSError as e:
            raise ManifestError(f"Failed to write run manifest {path}: {e}")
        self.logger.debug(f"Saved run manifest to {path}")

        if self.s3_client:
            key = self.s3_key(output_dir)
            try:
                self.s3_client.put_object(
                    Bucket=self.s3_bucket,
                    Key=key,
                    Body=content,
                    ContentType='application/json'
                )
                self.logger.info(f"Mirrored run manifest to s3://{self.s3_bucket}/{key}")
            except (ClientError, BotoCoreError) as e:
                self.logger.error(f"Error mirroring run manifest to S3: {e}")
        return path

    def load(self, path: str) -> RunManifest:
        """
        Read a manifest from a local path (a directory means its manifest.json)
        or from an s3://bucket/key URL.

        Raises:
            ManifestError: If the manifest is missing or malformed
        """
        if path.startswith('s3://'):
            return self._load_s3(path)
        if os.path.isdir(path):
            path = os.path.join(path, MANIFEST_NAME)
        try:
            with open(path) as f:
                content = f.read()
        except OSError as e:
            raise ManifestError(f"Failed to read run manifest {path}: {e}")
        return RunManifest.from_json(content)

    def _load_s3(self, url: str) -> RunManifest:
        bucket, _, key = url[len('s3://'):].partition('/')
        client = self.s3_client or boto3.client('s3')
        try:
            response = client.get_object(Bucket=bucket, Key=key)
            content = response['Body'].read().decode('utf-8')
        except ClientError as e:
            if e.response['Error']['Code'] == 'NoSuchKey':
                raise ManifestError(f"Run manifest not found at {url}")
            raise ManifestError(f"Failed to read run manifest {url}: {e}")
        return RunManifest.from_json(content)
