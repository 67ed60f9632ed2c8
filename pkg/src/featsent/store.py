"""On-disk artifact store: run layout, lock file and provenance checks."""
import json
import os
from contextlib import contextmanager
from pathlib import Path

from .errors import FeatsentError, MissingArtifactError, ProvenanceError
from .serialization import MANIFEST

STORE_ENV = "FEATSENT_STORE"
LOCK = ".lock"


def default_store_root():
    return Path(os.environ.get(STORE_ENV, "featsent_store"))


def write_json(path, obj):
    """Write ``obj`` as sorted, indented JSON; untouched when the content is unchanged."""
    path = Path(path)
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path.exists() and path.read_text() == text:
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def read_json(path):
    return json.loads(Path(path).read_text())


class ArtifactStore:
    """``<root>/runs/<name>/{config.json, checkpoints/, adv_cache/<attack>/, reports/, exports/}``."""

    def __init__(self, root, name):
        self.root = Path(root)
        self.name = name
        self.run = self.root / "runs" / name

    def path(self, *parts):
        return self.run.joinpath(*parts)

    def checkpoint(self, name):
        return self.path("checkpoints", name)

    def adv_cache(self, attack, split):
        return self.path("adv_cache", attack, split)

    def report(self, name):
        return self.path("reports", name)

    def export(self, name):
        return self.path("exports", name)

    @contextmanager
    def lock(self):
        self.run.mkdir(parents=True, exist_ok=True)
        lock = self.run / LOCK
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise FeatsentError(f"store {self.run} is locked by another command (remove {lock} if stale)") from None
        try:
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            yield self
        finally:
            lock.unlink(missing_ok=True)

    def stage_hash(self, path):
        """Stage hash recorded in the artifact at ``path`` (a directory or a JSON report), else None."""
        path = Path(path)
        target = path / MANIFEST if path.is_dir() else path
        if not target.is_file():
            return None
        return read_json(target).get("stage_hash")

    def is_current(self, path, stage_hash, force=False):
        """True when ``path`` already holds the output of ``stage_hash``.

        An artifact from a different stage hash is an error unless ``force``.
        """
        if force:
            return False
        found = self.stage_hash(path)
        if found is None:
            return False
        if found != stage_hash:
            raise ProvenanceError(
                f"{path} was produced from different inputs ({found} != {stage_hash}); rerun with --force"
            )
        return True

    def require(self, path, stage_hash, command):
        """Check that an upstream artifact exists and matches ``stage_hash``."""
        found = self.stage_hash(path)
        if found is None:
            raise MissingArtifactError(f"missing artifact {path}; run `featsent {command}` first", command)
        if found != stage_hash:
            raise ProvenanceError(
                f"{path} is stale ({found} != {stage_hash}); rerun `featsent {command} --force`"
            )
        return path

    def manifests(self):
        """Every manifest or JSON report under the run, as (path, dict)."""
        out = []
        for p in sorted(self.run.rglob("*.json")):
            if p.name == "config.json" or p.parent.name == "exports":
                continue
            try:
                out.append((p, read_json(p)))
            except json.JSONDecodeError as err:
                raise ProvenanceError(f"corrupt manifest {p}: {err}") from None
        return out

    def verify(self):
        """Walk every manifest and check that its upstream chain resolves; returns a list of problems."""
        problems = []
        for path, m in self.manifests():
            if "stage_hash" not in m:
                continue
            for up in m.get("upstream", []):
                target = self.run / up["path"]
                found = self.stage_hash(target)
                if found is None:
                    problems.append(f"{path.relative_to(self.run)}: upstream {up['path']} missing")
                elif found != up["stage_hash"]:
                    problems.append(f"{path.relative_to(self.run)}: upstream {up['path']} hash {found} != {up['stage_hash']}")
        return problems
