# Tests package for the MVLT scene-text toolkit
