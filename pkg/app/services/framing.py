# app/services/framing.py
"""
网关帧传输（asyncio 流）
帧格式：4 字节大端长度 + UTF-8 JSON 对象（必须带 "kind" 字段）
一问一答；心跳是同一连接上的单向消息
"""

import asyncio
import json
import logging
import struct
from typing import Any, Dict, Optional

from app.schemas.gateway import Heartbeat, RouteQuery, RouteReply, Stats, StatsQuery
from app.schemas.routing import NodeRole
from app.services.exceptions import FrameTooLargeException, ProtocolException
from app.services.gateway_service import GatewayService

logger = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME_BYTES = 1 << 20


def encode_frame(message: Dict[str, Any]) -> bytes:
    payload = json.dumps(message, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    if len(payload) > MAX_FRAME_BYTES:
        raise FrameTooLargeException(f"帧过大: {len(payload)} 字节")
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes) -> Dict[str, Any]:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolException(f"帧内容不是合法 JSON: {e}")
    if not isinstance(message, dict) or "kind" not in message:
        raise ProtocolException("帧内容必须是带 kind 字段的 JSON 对象")
    return message


async def read_frame(reader: asyncio.StreamReader) -> Dict[str, Any]:
    """
    读一帧

    Raises:
        asyncio.IncompleteReadError: 对端关闭
        ProtocolException: 长度越界或内容非法
    """
    header = await reader.readexactly(HEADER.size)
    (length,) = HEADER.unpack(header)
    if length > MAX_FRAME_BYTES:
        raise FrameTooLargeException(f"帧长度越界: {length}")
    payload = await reader.readexactly(length)
    return decode_payload(payload)


async def write_frame(writer: asyncio.StreamWriter, message: Dict[str, Any]):
    writer.write(encode_frame(message))
    await writer.drain()


class FramedGatewayServer:
    """帧协议网关服务器，内含后台清理任务"""

    def __init__(
        self,
        service: GatewayService,
        host: str = "127.0.0.1",
        port: int = 0,
        prune_interval: float = 5.0,
    ):
        self.service = service
        self.host = host
        self.port = port
        self.prune_interval = prune_interval
        self._server: Optional[asyncio.AbstractServer] = None
        self._pruner: Optional[asyncio.Task] = None

    @property
    def address(self) -> str:
        return f"{self.host}:{self.port}"

    async def start(self):
        self._server = await asyncio.start_server(self._handle_connection, self.host, self.port)
        # port=0 时取实际绑定端口
        self.port = self._server.sockets[0].getsockname()[1]
        self._pruner = asyncio.create_task(prune_loop(self.service, self.prune_interval))
        logger.info(f"帧协议网关监听 {self.address}")

    async def serve_forever(self):
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def close(self):
        if self._pruner is not None:
            self._pruner.cancel()
            try:
                await self._pruner
            except asyncio.CancelledError:
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        logger.info("帧协议网关已关闭")

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info("peername")
        try:
            while True:
                try:
                    message = await read_frame(reader)
                except asyncio.IncompleteReadError:
                    break
                except ProtocolException as e:
                    await write_frame(writer, self.service.protocol_error(str(e)).model_dump(mode="json"))
                    if isinstance(e, FrameTooLargeException):
                        break
                    continue
                reply = self.service.dispatch(message)
                if reply is not None:
                    await write_frame(writer, reply)
        except ConnectionError as e:
            logger.debug(f"连接断开 {peer}: {e}")
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except ConnectionError:
                pass


async def prune_loop(service: GatewayService, interval: float):
    """定时清理失联后端与过期会话"""
    while True:
        await asyncio.sleep(interval)
        try:
            service.prune_dead()
            service.evict_sessions()
        except Exception as e:
            logger.error(f"后台清理失败: {e}", exc_info=True)


class FramedGatewayClient:
    """帧协议客户端（测试与后端心跳用）"""

    def __init__(self, host: str, port: int):
        self.host = host
        self.port = port
        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None

    async def connect(self) -> "FramedGatewayClient":
        self._reader, self._writer = await asyncio.open_connection(self.host, self.port)
        return self

    async def __aenter__(self):
        return await self.connect()

    async def __aexit__(self, *exc):
        await self.close()

    async def request(self, message: Dict[str, Any]) -> Dict[str, Any]:
        await write_frame(self._writer, message)
        return await read_frame(self._reader)

    async def route(self, query: RouteQuery) -> RouteReply:
        return RouteReply.model_validate(await self.request(query.model_dump(mode="json")))

    async def heartbeat(self, server_id: str, role: NodeRole, address: str):
        message = Heartbeat(server_id=server_id, role=role, address=address).model_dump(mode="json")
        await write_frame(self._writer, message)

    async def stats(self) -> Stats:
        return Stats.model_validate(await self.request(StatsQuery().model_dump(mode="json")))

    async def close(self):
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except ConnectionError:
                pass
            self._writer = None
