"""Offline stand-in for youtube-transcript-api: serves canned transcripts, no network."""
from dataclasses import dataclass

__version__ = "1.2.2"

_TRANSCRIPTS = {
    "vr360-march-2018": [
        (0.0, 3.2, "We are standing at the edge of a forest, long before any of us."),
        (3.2, 4.1, "Look up. The trees here are taller than cathedrals."),
        (7.3, 5.0, "Something moves between the ferns."),
        (12.3, 4.4, "There they are: the dinosaurs, grazing in the morning light."),
        (16.7, 5.2, "100000000 years ago this valley belonged to them."),
        (21.9, 4.0, "And then, in a single day, the sky changed."),
    ],
}


class NoTranscriptFound(Exception):
    pass


@dataclass
class FetchedTranscriptSnippet:
    start: float
    duration: float
    text: str


class Transcript:
    def __init__(self, video_id, language_code):
        self.video_id = video_id
        self.language_code = language_code

    def fetch(self):
        return [FetchedTranscriptSnippet(*row) for row in _TRANSCRIPTS[self.video_id]]


class TranscriptList:
    def __init__(self, video_id):
        self.video_id = video_id

    def find_transcript(self, language_codes):
        if "en" not in language_codes:
            raise NoTranscriptFound(f"no transcript in {language_codes} for {self.video_id}")
        return Transcript(self.video_id, "en")


class YouTubeTranscriptApi:
    def list(self, video_id):
        if video_id not in _TRANSCRIPTS:
            raise NoTranscriptFound(f"no transcripts for video {video_id}")
        return TranscriptList(video_id)

    def fetch(self, video_id, languages=("en",)):
        return self.list(video_id).find_transcript(list(languages)).fetch()
