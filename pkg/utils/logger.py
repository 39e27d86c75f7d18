"""
Logger - Centralized logging system for the Neural Plasticity Network runner
Handles all logging across the application with proper formatting and rotation
"""

import logging
import logging.handlers
import os
import re
import sys
import traceback
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence, Tuple


class ConsoleFormatter(logging.Formatter):
    """Custom formatter for console output with colors"""

    # ANSI color codes
    COLORS = {
        'DEBUG': '\033[36m',     # Cyan
        'INFO': '\033[32m',      # Green
        'WARNING': '\033[33m',   # Yellow
        'ERROR': '\033[31m',     # Red
        'CRITICAL': '\033[41m',  # Red background
        'RESET': '\033[0m'
    }

    def format(self, record):
        levelname = record.levelname
        if levelname in self.COLORS:
            record.levelname = f"{self.COLORS[levelname]}{levelname}{self.COLORS['RESET']}"
        try:
            return super().format(record)
        finally:
            record.levelname = levelname


class FileFormatter(logging.Formatter):
    """Custom formatter for file output (no colors)"""

    _ANSI = re.compile(r'\033\[[0-9;]*m')

    def format(self, record):
        if isinstance(record.msg, str):
            record.msg = self._ANSI.sub('', record.msg)
        return super().format(record)


class NPNLogger:
    """Owns every named logger of a run"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(NPNLogger, cls).__new__(cls)
            cls._instance._initialized = False
        return cls._instance

    def __init__(self):
        if self._initialized:
            return

        self.loggers = {}
        self.handlers = {}
        self.log_directory = os.environ.get('NPN_LOG_DIR', 'logs')
        self._initialized = True

    def configure(self, log_directory: Optional[str] = None) -> None:
        """
        Point future file handlers at a different directory

        Args:
            log_directory: Directory for rotating log files
        """
        if log_directory:
            self.log_directory = log_directory

    def setup_logger(self,
                     name: str,
                     level: str = "INFO",
                     log_to_console: bool = True,
                     log_to_file: bool = True,
                     max_file_size_mb: int = 10,
                     backup_count: int = 5) -> logging.Logger:
        """
        Setup a logger with console and file handlers

        Args:
            name: Logger name (e.g., 'controller', 'training', 'data')
            level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            log_to_console: Whether to log to console
            log_to_file: Whether to log to file
            max_file_size_mb: Maximum log file size in MB
            backup_count: Number of backup files to keep

        Returns:
            logging.Logger: Configured logger instance
        """
        if name in self.loggers:
            return self.loggers[name]

        logger = logging.getLogger(name)
        numeric_level = getattr(logging, level.upper(), logging.INFO)
        logger.setLevel(numeric_level)
        logger.handlers.clear()

        log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

        if log_to_console:
            console_handler = logging.StreamHandler(sys.stdout)
            console_handler.setLevel(numeric_level)
            console_handler.setFormatter(ConsoleFormatter(log_format, datefmt='%H:%M:%S'))
            logger.addHandler(console_handler)
            self.handlers[f"{name}_console"] = console_handler

        if log_to_file:
            os.makedirs(self.log_directory, exist_ok=True)
            log_file = os.path.join(self.log_directory, f"{name}.log")
            file_handler = logging.handlers.RotatingFileHandler(
                filename=log_file,
                maxBytes=max_file_size_mb * 1024 * 1024,
                backupCount=backup_count,
                encoding='utf-8'
            )
            file_handler.setLevel(numeric_level)
            file_handler.setFormatter(FileFormatter(log_format, datefmt='%Y-%m-%d %H:%M:%S'))
            logger.addHandler(file_handler)
            self.handlers[f"{name}_file"] = file_handler

        self.loggers[name] = logger
        return logger

    def get_logger(self, name: str) -> logging.Logger:
        """
        Get an existing logger or create a new one with default settings

        Args:
            name: Logger name

        Returns:
            logging.Logger: Logger instance
        """
        if name in self.loggers:
            return self.loggers[name]
        return self.setup_logger(name)

    def set_level(self, name: str, level: str) -> None:
        """
        Set logging level for a logger and all of its handlers

        Args:
            name: Logger name
            level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        """
        if name in self.loggers:
            numeric_level = getattr(logging, level.upper(), logging.INFO)
            self.loggers[name].setLevel(numeric_level)
            for handler in self.loggers[name].handlers:
                handler.setLevel(numeric_level)

    def log_performance(self,
                        operation: str,
                        start_time: datetime,
                        end_time: datetime = None,
                        details: Dict[str, Any] = None,
                        logger_name: str = "performance") -> None:
        """
        Log wall-clock duration of an operation

        Args:
            operation: Name of the operation
            start_time: Operation start time
            end_time: Operation end time (defaults to now)
            details: Additional performance details
            logger_name: Logger to use
        """
        if end_time is None:
            end_time = datetime.now()

        duration = (end_time - start_time).total_seconds()
        log_msg = f"PERFORMANCE - {operation}: {duration:.3f}s"
        if details:
            log_msg += " | " + " | ".join(f"{k}: {v}" for k, v in details.items())

        self.get_logger(logger_name).info(log_msg)

    def log_exception(self,
                      exception: Exception,
                      context: str = "",
                      logger_name: str = "error") -> None:
        """
        Log an exception with full traceback

        Args:
            exception: Exception object
            context: Additional context about where the error occurred
            logger_name: Logger to use
        """
        logger = self.get_logger(logger_name)
        tb_str = "".join(traceback.format_exception(type(exception), exception,
                                                    exception.__traceback__))

        log_msg = f"EXCEPTION - {type(exception).__name__}: {exception}"
        if context:
            log_msg += f" | Context: {context}"

        logger.error(log_msg)
        logger.debug(f"Traceback:\n{tb_str}")

    def log_epoch(self, record: Any, logger_name: str = "training") -> None:
        """
        Log one TrainRecord row

        Args:
            record: lifecycle.TrainRecord
            logger_name: Logger to use
        """
        counts = "-".join(str(c) for c in record.active_counts)
        log_msg = (f"EPOCH - {record.epoch} | {record.stage} | k={record.k:g} | "
                   f"loss: {record.train_loss:.5f} | penalty: {record.penalty:.5f} | "
                   f"acc: {record.test_acc:.4f} | arch: {counts} ({record.param_count})")
        self.get_logger(logger_name).info(log_msg)

    def log_stage_transition(self, old_stage: Optional[str], new_stage: str, k: float,
                             logger_name: str = "training") -> None:
        """
        Log a learning stage change

        Args:
            old_stage: Previous stage label (None at the first epoch)
            new_stage: Stage being entered
            k: Gate scale used in the new stage
            logger_name: Logger to use
        """
        self.get_logger(logger_name).info(
            f"STAGE - {old_stage or 'start'} -> {new_stage} | k={k:g}")

    def log_expansion(self, epoch: int, activations: Sequence[Tuple[int, List[int]]],
                      logger_name: str = "training") -> None:
        """
        Log hibernated units woken up by the expansion controller

        Args:
            epoch: Epoch the activations happened in
            activations: (layer index, unit indices) pairs
            logger_name: Logger to use
        """
        if not activations:
            return
        detail = ", ".join(f"layer {layer}: +{len(units)}" for layer, units in activations)
        self.get_logger(logger_name).info(f"EXPANSION - epoch {epoch} | {detail}")


# Global logger instance
_logger_instance = None


def _instance() -> NPNLogger:
    global _logger_instance
    if _logger_instance is None:
        _logger_instance = NPNLogger()
    return _logger_instance


def setup_logger(name: str, **kwargs) -> logging.Logger:
    """
    Convenience function to setup a logger

    Args:
        name: Logger name
        **kwargs: Additional arguments for NPNLogger.setup_logger

    Returns:
        logging.Logger: Configured logger
    """
    return _instance().setup_logger(name, **kwargs)


def get_logger(name: str) -> logging.Logger:
    """Convenience function to get a logger"""
    return _instance().get_logger(name)


def set_log_level(name: str, level: str) -> None:
    """Convenience function to change a logger's level"""
    _instance().set_level(name, level)


def configure_logging(log_directory: Optional[str] = None) -> None:
    """Convenience function to redirect log files"""
    _instance().configure(log_directory)


def log_performance(operation: str, start_time: datetime, **kwargs) -> None:
    """Convenience function to log performance"""
    _instance().log_performance(operation, start_time, **kwargs)


def log_exception(exception: Exception, **kwargs) -> None:
    """Convenience function to log an exception"""
    _instance().log_exception(exception, **kwargs)


def log_epoch(record: Any, **kwargs) -> None:
    """Convenience function to log a TrainRecord"""
    _instance().log_epoch(record, **kwargs)


def log_stage_transition(old_stage: Optional[str], new_stage: str, k: float, **kwargs) -> None:
    """Convenience function to log a stage change"""
    _instance().log_stage_transition(old_stage, new_stage, k, **kwargs)


def log_expansion(epoch: int, activations: Sequence[Tuple[int, List[int]]], **kwargs) -> None:
    """Convenience function to log expansion events"""
    _instance().log_expansion(epoch, activations, **kwargs)
