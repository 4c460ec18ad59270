"""
Parallel processing - 有界并发执行，结果按输入顺序返回
"""

import asyncio
import logging
from typing import Callable, List, Sequence, TypeVar, Union

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


class ParallelProcessor:
    """并行处理器：同步函数放进线程池执行，信号量限流"""

    def __init__(self, max_workers: int = 4):
        self.max_workers = max_workers
        self.completed = 0

    async def map(
        self, func: Callable[[T], R], items: Sequence[T], label: str = "任务"
    ) -> List[Union[R, BaseException]]:
        """
        并行执行 func(item)

        Args:
            func: 同步函数
            items: 输入序列
            label: 日志中的任务名

        Returns:
            与 items 等长、同序的结果列表；失败项为对应的异常对象
        """
        if not items:
            return []
        semaphore = asyncio.Semaphore(self.max_workers)
        self.completed = 0
        total = len(items)

        async def _run_with_limit(item: T) -> R:
            async with semaphore:
                result = await asyncio.to_thread(func, item)
                self.completed += 1
                logger.debug(f"{label}进度: {self.completed}/{total}")
                return result

        results = await asyncio.gather(
            *(_run_with_limit(item) for item in items), return_exceptions=True
        )

        failed = sum(1 for r in results if isinstance(r, BaseException))
        if failed:
            logger.warning(f"{label}: {failed}/{total} 项失败")
        return list(results)


def run_parallel(
    func: Callable[[T], R], items: Sequence[T], max_workers: int = 4, label: str = "任务"
) -> List[Union[R, BaseException]]:
    """同步入口"""
    return asyncio.run(ParallelProcessor(max_workers).map(func, items, label))
