"""System files: expression language and the JSON system format."""
