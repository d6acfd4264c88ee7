import os
import sys
from pathlib import Path
from typing import Set, Tuple

from loguru import logger

from tempomesh.errors import OutputPathError


class OutputGuard:
    """Checks run output locations before anything is written."""

    @staticmethod
    def get_windows_system_paths() -> Set[Path]:
        system_drive = os.environ.get("SystemDrive", "C:")
        return {
            Path(f"{system_drive}/Boot"),
            Path(f"{system_drive}/ProgramData"),
            Path(f"{system_drive}/Program Files"),
            Path(f"{system_drive}/Program Files (x86)"),
            Path(f"{system_drive}/Recovery"),
            Path(f"{system_drive}/System Volume Information"),
            Path(f"{system_drive}/Windows"),
        }

    @staticmethod
    def get_linux_system_paths() -> Set[Path]:
        return {
            Path("/bin"),
            Path("/boot"),
            Path("/dev"),
            Path("/etc"),
            Path("/lib"),
            Path("/lib32"),
            Path("/lib64"),
            Path("/proc"),
            Path("/run"),
            Path("/sbin"),
            Path("/sys"),
            Path("/usr"),
            Path("/var/lib"),
            Path("/var/log"),
            Path("/snap"),
        }

    @staticmethod
    def get_macos_system_paths() -> Set[Path]:
        return {
            Path("/Applications"),
            Path("/Library"),
            Path("/System"),
            Path("/bin"),
            Path("/cores"),
            Path("/dev"),
            Path("/sbin"),
            Path("/usr"),
        }

    @classmethod
    def get_system_paths(cls) -> Set[Path]:
        """Get system-critical paths based on the current operating system."""
        if sys.platform == "win32":
            return cls.get_windows_system_paths()
        elif sys.platform == "darwin":
            return cls.get_macos_system_paths()
        else:
            return cls.get_linux_system_paths()

    @classmethod
    def is_system_path(cls, path: Path) -> bool:
        """
        Check if the given path is a system directory or lies inside one.

        Args:
            path (Path): The path to check.

        Returns:
            bool: True if the path is a system path. Unresolvable paths count as system paths.
        """
        try:
            path = Path(path).resolve()
            return any(
                path == sys_path or path.is_relative_to(sys_path)
                for sys_path in cls.get_system_paths()
            )
        except (OSError, RuntimeError) as e:
            logger.warning(f"Failed to resolve path {path}: {str(e)}")
            return True

    @classmethod
    def is_safe_output(cls, path: Path, force: bool = False) -> Tuple[bool, str]:
        """
        Decide whether a run may write into ``path``.

        Args:
            path (Path): Output directory.
            force (bool): Allow an existing non-empty directory.

        Returns:
            Tuple[bool, str]: (is_safe, reason_if_unsafe)
        """
        path = Path(path)
        if cls.is_system_path(path):
            return False, f"Output blocked: {path} is a system directory"

        if path.exists():
            if not path.is_dir():
                return False, f"Output blocked: {path} exists and is not a directory"
            if any(path.iterdir()) and not force:
                return False, f"Output blocked: {path} is not empty (use --force to reuse it)"
            if not os.access(path, os.W_OK):
                return False, f"Output blocked: {path} is not writable"
            return True, ""

        parent = path.parent
        while not parent.exists() and parent != parent.parent:
            parent = parent.parent
        if not parent.is_dir() or not os.access(parent, os.W_OK):
            return False, f"Output blocked: parent directory {parent} is not writable"
        return True, ""

    @classmethod
    def prepare(cls, path: Path, force: bool = False) -> Path:
        """
        Validate ``path`` and create it.

        Raises:
            OutputPathError: If the location is unsafe or cannot be created.
        """
        is_safe, reason = cls.is_safe_output(path, force)
        if not is_safe:
            logger.warning(f"OUTPUT [BLOCKED] | {reason}")
            raise OutputPathError(reason)
        try:
            Path(path).mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputPathError(f"Cannot create output directory {path}: {e}") from e
        logger.debug(f"OUTPUT [READY] | path: {path}")
        return Path(path)
